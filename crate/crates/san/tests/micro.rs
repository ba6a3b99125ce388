//! Temporary rebalanced-objective probe. Not part of the suite.

use san::config::RunConfig;
use san::data::{load_dataset, make_pairs, synth_generate};
use san::discriminator::Discriminator;
use san::generator::Generator;
use san::losses::{masked_l1, FeatureExtractor, LossWeights};
use san::nn::Adam;
use san::rng::derive;
use san::trainer::{assemble_batch, train_step};

#[test]
#[ignore]
fn micro_rebalanced_overfit() {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_generate(&cfg.synth, &data).unwrap();
    let ds = load_dataset(&data, "train").unwrap();
    let pairs: Vec<_> = make_pairs(&ds).unwrap().into_iter().take(8).collect();
    let batch = assemble_batch::<f32>(&ds, &pairs, false).unwrap();

    let weights = LossWeights {
        adversarial: 0.2,
        l1: 15.0,
        perceptual: 5.0,
    };
    let mut gen = Generator::<f32>::new(&cfg.generator, &mut derive(1, "init/generator")).unwrap();
    let mut disc =
        Discriminator::<f32>::new(&cfg.discriminator, &mut derive(1, "init/discriminator")).unwrap();
    let mut opt_g = Adam::<f32>::new(0.5, 0.999);
    let mut opt_d = Adam::<f32>::new(0.5, 0.999);
    let mut ext = Some(FeatureExtractor::<f32>::new(3, 7001));

    for step in 1..=300usize {
        let rec = train_step(
            &mut gen, &mut disc, &mut opt_g, &mut opt_d, ext.as_mut(), &batch, &weights, true,
            2e-4, step,
        )
        .unwrap();
        if step == 1 || step % 50 == 0 {
            let fake = gen.generate(&batch.appearance, &batch.semantic).unwrap();
            let ml1 = masked_l1(&fake, &batch.target_image, &batch.target_mask);
            println!(
                "step {step:3}: l1 {:.4} adv_g {:.4} | eval masked_l1 {ml1:.4}",
                rec.l1, rec.adv_g
            );
        }
    }
}
