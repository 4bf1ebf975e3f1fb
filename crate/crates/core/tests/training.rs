use copydst::checkpoint;
use copydst::data::{generate_synthetic, GrammarConfig};
use copydst::embeddings::EmbeddingTable;
use copydst::eval::evaluate;
use copydst::train::{train, TrainConfig};

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_size: 8,
        word_dim: 8,
        ngram_dim: 4,
        epochs: 2,
        batch_size: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 4, 3).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, ..tiny_config(7) };
    let fresh = copydst::Tracker::new(&cfg, EmbeddingTable::hashed(cfg.embedding_config()), &ont).unwrap();
    let out = train(&corpus, None, &ont, EmbeddingTable::hashed(cfg.embedding_config()), &cfg).unwrap();
    assert!(!out.step_losses.is_empty());
    for ((name, a), (_, b)) in fresh.params().iter().zip(out.tracker.params().iter()) {
        assert_eq!(a.values(), b.values(), "{name}");
    }
}

#[test]
fn fixed_seed_gives_identical_checkpoints_and_reports() {
    let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 8, 4).unwrap();
    let (dev, _) = generate_synthetic(&GrammarConfig::restaurant(), 3, 5).unwrap();
    let run = || {
        let cfg = TrainConfig { dropout: 0.2, ..tiny_config(11) };
        let out = train(&corpus, Some(&dev), &ont, EmbeddingTable::hashed(cfg.embedding_config()), &cfg).unwrap();
        let report = evaluate(&out.tracker, &dev, None).unwrap().to_json();
        (checkpoint::to_bytes(&out.tracker), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a == b, "checkpoints differ");
    assert_eq!(ra, rb);
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 6, 8).unwrap();
    let cfg = tiny_config(2);
    let out = train(&corpus, None, &ont, EmbeddingTable::hashed(cfg.embedding_config()), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&out.tracker, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let direct = evaluate(&out.tracker, &corpus, None).unwrap();
    assert_eq!(evaluate(&loaded, &corpus, None).unwrap(), direct);
    assert_eq!(evaluate(&out.tracker, &corpus, None).unwrap(), direct);
}

#[test]
fn one_epoch_reduces_loss_on_most_seeds() {
    let (corpus, ont) = generate_synthetic(&GrammarConfig::restaurant(), 10, 1).unwrap();
    let mut decreased = 0;
    for seed in 1..=5 {
        let cfg = TrainConfig {
            hidden_size: 16,
            word_dim: 16,
            ngram_dim: 8,
            epochs: 1,
            seed,
            ..Default::default()
        };
        let out = train(&corpus, None, &ont, EmbeddingTable::hashed(cfg.embedding_config()), &cfg).unwrap();
        let (first, last) = (out.step_losses[0], *out.step_losses.last().unwrap());
        if last < first {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "loss decreased on {decreased} of 5 seeds");
}
