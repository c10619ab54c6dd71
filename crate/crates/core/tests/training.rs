//! Training sanity checks at desk scale.

use oralbb::data::PreprocessConfig;
use oralbb::model::{NetworkConfig, Variant};
use oralbb::synth::{generate_dataset, parse_mix};
use oralbb::train::{attach_priors, prepare_in_memory, train_stage2, validate, PriorProvider, PriorSettings, TrainConfig};

#[test]
fn two_samples_overfit_with_oracle_priors() {
    // full dentition: every tooth channel is occupied in both images
    let (manifest, images) = generate_dataset(2, &parse_mix("4:1").unwrap(), 11, (256, 256)).unwrap();
    assert!(manifest.entries.iter().all(|e| e.annotations.len() == 32));
    let ids: Vec<String> = manifest.entries.iter().map(|e| e.image_id.clone()).collect();
    let pre = PreprocessConfig {
        target_resolution: (128, 128),
        ..Default::default()
    };
    let prepared = prepare_in_memory(&manifest, &images, &ids, &pre).unwrap();
    let samples = attach_priors(prepared, &PriorProvider::Oracle, &PriorSettings::default()).unwrap();
    let net_cfg = NetworkConfig {
        variant: Variant::OralBbNet,
        drop_rate: 0.0,
        ..NetworkConfig::small()
    };
    // batch of 2: one step per epoch
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 2,
        learning_rate: 1e-2,
        beta1: 0.9,
        augment_flips: false,
        plateau_patience: 200,
        ..Default::default()
    };
    let outcome = train_stage2(&samples, &samples, &net_cfg, &cfg).unwrap();
    assert_eq!(outcome.steps, 200);
    let (_, dice) = validate(&outcome.best, &samples, &cfg).unwrap();
    let d = dice.overall().unwrap();
    assert!(d > 0.95, "training Dice {d}");
}
