// Scratch calibration: margin-probing for the strategy comparisons.
use ttr::adapt::{AdaptationConfig, StatsSource, Strategy};
use ttr::augment::AugmentationPolicy;
use ttr::data::{corrupt, generate_synthetic, CorruptionKind, CorruptionSpec, Split};
use ttr::eval::evaluate;
use ttr::nn::{Model, ModelConfig, TrainConfig};

fn main() {
    let mcfg = ModelConfig::conv_small([1, 28, 28], 4);
    let mut model = Model::<f32>::init(&mcfg, 7).unwrap();
    let train = generate_synthetic(4, 500, 28, ttr::rng::derive(7, 1, 0)).unwrap();
    let mut test = generate_synthetic(4, 150, 28, ttr::rng::derive(7, 1, 1)).unwrap();
    test.split = Split::TestClean;
    let tc = TrainConfig { epochs: 10, seed: 7, ..Default::default() };
    ttr::nn::train_supervised(&mut model, &train, Some(&test), &tc).unwrap();

    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 4, 1234).unwrap();
    let shifted = corrupt(&test, &spec).unwrap();

    let sev3 = AugmentationPolicy::default();
    let sev5 = AugmentationPolicy { severity: 5, ..Default::default() };
    let sev7 = AugmentationPolicy { severity: 7, ..Default::default() };

    // stats source comparison for bn_only
    for (name, src) in [
        ("bn aug_batch", StatsSource::AugmentedBatch),
        ("bn orig_point", StatsSource::OriginalPoint),
    ] {
        let cfg = AdaptationConfig {
            strategy: Strategy::BnOnly,
            stats_source: src,
            ..Default::default()
        };
        let r = evaluate(&model, &shifted, &cfg, &sev3, 7, 1).unwrap();
        println!("{name}: {:.2}%", r.error_pct);
    }
    // how many predictions differ from none?
    let none = evaluate(
        &model,
        &shifted,
        &AdaptationConfig { strategy: Strategy::None, ..Default::default() },
        &sev3,
        7,
        1,
    )
    .unwrap();
    let bn = evaluate(
        &model,
        &shifted,
        &AdaptationConfig { strategy: Strategy::BnOnly, ..Default::default() },
        &sev3,
        7,
        1,
    )
    .unwrap();
    let diff = none
        .records
        .iter()
        .zip(&bn.records)
        .filter(|(a, b)| a.predicted != b.predicted)
        .count();
    println!("bn_only vs none: {diff} predictions differ of {}", none.records.len());

    for (pname, policy) in [("sev3", &sev3), ("sev5", &sev5), ("sev7", &sev7)] {
        let tta = AdaptationConfig { strategy: Strategy::Tta, ..Default::default() };
        let r = evaluate(&model, &shifted, &tta, policy, 7, 1).unwrap();
        println!("[{pname}] tta: {:.2}%", r.error_pct);
        for eta in [0.005, 0.01, 0.02, 0.04] {
            for steps in [1usize, 2] {
                let memo = AdaptationConfig { eta, steps, ..Default::default() };
                let r = evaluate(&model, &shifted, &memo, policy, 7, 1).unwrap();
                let ce = AdaptationConfig {
                    strategy: Strategy::CeSinglePoint,
                    eta,
                    steps,
                    ..Default::default()
                };
                let rce = evaluate(&model, &shifted, &ce, policy, 7, 1).unwrap();
                let pce = AdaptationConfig { strategy: Strategy::Pce, eta, steps, ..Default::default() };
                let rpce = evaluate(&model, &shifted, &pce, policy, 7, 1).unwrap();
                println!(
                    "[{pname}] eta={eta} steps={steps}: memo {:.2}% ce {:.2}% pce {:.2}%",
                    r.error_pct, rce.error_pct, rpce.error_pct
                );
            }
        }
    }
}
