// Scratch calibration: margins with the higher-contrast generator.
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
    let mut val = generate_synthetic(4, 50, 28, ttr::rng::derive(7, 1, 2)).unwrap();
    val.split = Split::TestClean;
    let tc = TrainConfig { epochs: 10, seed: 7, ..Default::default() };
    let hist = ttr::nn::train_supervised(&mut model, &train, Some(&test), &tc).unwrap();
    println!(
        "final train_acc {:.4} heldout_acc {:.4}",
        hist.last().unwrap().train_accuracy,
        hist.last().unwrap().heldout_accuracy.unwrap()
    );

    let policy = AugmentationPolicy::default();
    let base = AdaptationConfig { strategy: Strategy::None, ..Default::default() };

    for kind in ttr::data::ALL_CORRUPTIONS {
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

    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 4, 1234).unwrap();
    let shifted = corrupt(&test, &spec).unwrap();

    for (name, cfg) in [
        ("none     ", AdaptationConfig { strategy: Strategy::None, ..Default::default() }),
        (
            "bn aug   ",
            AdaptationConfig { strategy: Strategy::BnOnly, ..Default::default() },
        ),
        (
            "bn orig  ",
            AdaptationConfig {
                strategy: Strategy::BnOnly,
                stats_source: StatsSource::OriginalPoint,
                ..Default::default()
            },
        ),
        ("tta      ", AdaptationConfig { strategy: Strategy::Tta, ..Default::default() }),
    ] {
        let r = evaluate(&model, &shifted, &cfg, &policy, 7, 1).unwrap();
        println!("{name}: {:.2}%", r.error_pct);
    }

    for src in [StatsSource::AugmentedBatch, StatsSource::OriginalPoint] {
        for eta in [0.005, 0.01, 0.02] {
            let memo = AdaptationConfig { eta, stats_source: src, ..Default::default() };
            let r = evaluate(&model, &shifted, &memo, &policy, 7, 1).unwrap();
            let ce = AdaptationConfig {
                strategy: Strategy::CeSinglePoint,
                eta,
                stats_source: src,
                ..Default::default()
            };
            let rce = evaluate(&model, &shifted, &ce, &policy, 7, 1).unwrap();
            let pce = AdaptationConfig {
                strategy: Strategy::Pce,
                eta,
                stats_source: src,
                ..Default::default()
            };
            let rpce = evaluate(&model, &shifted, &pce, &policy, 7, 1).unwrap();
            println!(
                "src={src:?} eta={eta}: memo {:.2}% ce {:.2}% pce {:.2}%",
                r.error_pct, rce.error_pct, rpce.error_pct
            );
        }
    }

    // validation corruption: which eta wins on contrast severity 3?
    let vspec = CorruptionSpec::new(CorruptionKind::Contrast, 3, 777).unwrap();
    let vshift = corrupt(&val, &vspec).unwrap();
    for eta in [0.005, 0.01, 0.02] {
        let memo = AdaptationConfig { eta, ..Default::default() };
        let r = evaluate(&model, &vshift, &memo, &policy, 7, 1).unwrap();
        println!("val contrast s3 eta={eta}: memo {:.2}%", r.error_pct);
    }

    // gate fraction on the shifted split
    let bn = AdaptationConfig { strategy: Strategy::BnOnly, ..Default::default() };
    let r = evaluate(&model, &shifted, &bn, &policy, 7, 1).unwrap();
    let gate = 0.5 * 4f64.ln();
    let above = r.records.iter().filter(|x| x.marginal_entropy > gate).count();
    println!("gate: {}/{} above 0.5 ln C", above, r.records.len());

    // B sweep end points
    for b in [1usize, 16] {
        let memo = AdaptationConfig { b, eta: 0.01, ..Default::default() };
        let r = evaluate(&model, &shifted, &memo, &policy, 7, 1).unwrap();
        println!("B={b}: memo {:.2}% ({:.4}s/pt)", r.error_pct, r.mean_sec_per_point);
    }
}
