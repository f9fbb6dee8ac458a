//! Shared fixtures for the criterion benchmarks under `benches/`.

use mvlt_core::config::RunConfig;
use mvlt_core::data::Dataset;
use mvlt_core::model::Mvlt;
use mvlt_core::params::uniform;
use mvlt_core::rng::{rng_for, seeded};
use mvlt_core::text::Vocab;
use mvlt_core::train::{make_pretrain_batch, PretrainBatch, PretrainSettings};
use mvlt_core::{ParamStore, Tensor};

pub const SEED: u64 = 17;

pub fn random(shape: &[usize], index: u64) -> Tensor {
    uniform(&mut rng_for(SEED, "bench", index), shape, 1.0)
}

/// Toy model, its synthetic catalogue and one pre-training batch.
pub struct Toy {
    pub dataset: Dataset,
    pub vocab: Vocab,
    pub model: Mvlt,
    pub store: ParamStore,
    pub settings: PretrainSettings,
    pub batch: PretrainBatch,
}

impl Toy {
    pub fn new(batch_size: usize) -> Toy {
        let cfg = RunConfig {
            synth_products: 16,
            batch_size,
            seed: SEED,
            ..RunConfig::toy()
        };
        let dataset = cfg.dataset().expect("synthetic dataset");
        let vocab = cfg.vocab(&dataset).expect("vocabulary");
        let (model, store) = Mvlt::new(&cfg.model_config(&vocab).expect("model config"), SEED).expect("model");
        let settings = cfg.pretrain_settings();
        let batch = make_pretrain_batch(
            &dataset,
            &vocab,
            cfg.text_len,
            batch_size,
            &settings.masks,
            settings.neg_prob,
            &mut seeded(SEED),
        )
        .expect("batch");
        Toy {
            dataset,
            vocab,
            model,
            store,
            settings,
            batch,
        }
    }
}
