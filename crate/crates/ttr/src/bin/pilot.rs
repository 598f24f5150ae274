// Scratch calibration runs; removed before release.
use std::time::Instant;
use ttr::adapt::{AdaptationConfig, Strategy};
use ttr::augment::AugmentationPolicy;
use ttr::data::{corrupt, generate_synthetic, CorruptionKind, CorruptionSpec, Split};
use ttr::eval::evaluate;
use ttr::nn::{Model, ModelConfig, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let mcfg = ModelConfig::conv_small([1, 28, 28], 4);
    let mut model = Model::<f32>::init(&mcfg, 7).unwrap();
    let train = generate_synthetic(4, 500, 28, ttr::rng::derive(7, 1, 0)).unwrap();
    let mut test = generate_synthetic(4, 150, 28, ttr::rng::derive(7, 1, 1)).unwrap();
    test.split = Split::TestClean;

    let tc = TrainConfig { epochs: 10, seed: 7, ..Default::default() };
    let hist = ttr::nn::train_supervised(&mut model, &train, Some(&test), &tc).unwrap();
    for h in &hist {
        println!(
            "epoch {}: train_loss {:.4} train_acc {:.4} heldout_acc {:.4}",
            h.epoch,
            h.train_loss,
            h.train_accuracy,
            h.heldout_accuracy.unwrap()
        );
    }
    println!("training took {:.1}s", t0.elapsed().as_secs_f64());

    let policy = AugmentationPolicy::default();
    let base = AdaptationConfig { strategy: Strategy::None, ..Default::default() };

    // corruption degradation across kinds and severities (baseline strategy)
    for kind in [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Contrast,
        CorruptionKind::DefocusBlurApprox,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ] {
        let mut line = format!("{kind}: ");
        for sev in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, sev, 1234).unwrap();
            let shifted = corrupt(&test, &spec).unwrap();
            let r = evaluate(&model, &shifted, &base, &policy, 7, 1).unwrap();
            line.push_str(&format!("s{sev}={:.1}% ", r.error_pct));
        }
        println!("{line}");
    }
    let r = evaluate(&model, &test, &base, &policy, 7, 1).unwrap();
    println!("clean baseline error: {:.2}%", r.error_pct);

    // strategy comparison on gaussian severity 4
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 4, 1234).unwrap();
    let shifted = corrupt(&test, &spec).unwrap();
    for (name, cfg) in [
        ("none", AdaptationConfig { strategy: Strategy::None, ..Default::default() }),
        ("bn_only", AdaptationConfig { strategy: Strategy::BnOnly, ..Default::default() }),
        ("tta", AdaptationConfig { strategy: Strategy::Tta, ..Default::default() }),
        ("memo eta=0.0025", AdaptationConfig { eta: 0.0025, ..Default::default() }),
        ("memo eta=0.005", AdaptationConfig { ..Default::default() }),
        ("memo eta=0.01", AdaptationConfig { eta: 0.01, ..Default::default() }),
        ("memo eta=0.02", AdaptationConfig { eta: 0.02, ..Default::default() }),
        ("ce eta=0.005", AdaptationConfig { strategy: Strategy::CeSinglePoint, ..Default::default() }),
        ("pce eta=0.005", AdaptationConfig { strategy: Strategy::Pce, ..Default::default() }),
    ] {
        let t = Instant::now();
        let r = evaluate(&model, &shifted, &cfg, &policy, 7, 1).unwrap();
        println!(
            "{name}: error {:.2}%  ({:.0} adapted, {:.3}s/pt, total {:.1}s)",
            r.error_pct,
            r.records.iter().filter(|x| x.adapted).count() as f64,
            r.mean_sec_per_point,
            t.elapsed().as_secs_f64()
        );
    }

    // entropy distribution on the shifted split vs the 0.5 ln C gate
    let gate = 0.5 * (4.0f64).ln();
    let bn = AdaptationConfig { strategy: Strategy::BnOnly, ..Default::default() };
    let r = evaluate(&model, &shifted, &bn, &policy, 7, 1).unwrap();
    let above = r.records.iter().filter(|x| x.marginal_entropy > gate).count();
    println!(
        "marginal entropy > 0.5 ln C on shifted split: {}/{}",
        above,
        r.records.len()
    );
    println!("pilot total {:.1}s", t0.elapsed().as_secs_f64());
}
