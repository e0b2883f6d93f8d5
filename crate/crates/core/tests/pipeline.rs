use afn::convae_som::{ConvaeConfig, SomGrid};
use afn::data::{generate_synthetic, split, SynthConfig, TimeSeriesSet};

use afn::explain::node_representatives;
use afn::risk::{set_risk_map, RegimeShareScorer};
use afn::ifm::{evaluate_mse, train_afn, Ablation, AfnConfig, AfnModel};
use afn::transition::TmConfig;
use ndarray::{concatenate, s, Axis};

fn config(ablation: Ablation, seed: u64) -> AfnConfig {
    AfnConfig {
        tm: TmConfig {
            dmm_hidden: vec![32, 16],
            cond_hidden: vec![16],
            warmup_epochs: 3,
            cond_init_epochs: 3,
            epochs: 5,
            seed,
            ..TmConfig::default()
        },
        convae: ConvaeConfig {
            latent_dim: None,
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            grid: SomGrid { height: 6, width: 6 },
            ..ConvaeConfig::default()
        },
        lstm_hidden: 16,
        attention_dim: 8,
        damping_hidden: vec![8, 4],
        segment_len: 20,
        batch_size: 32,
        batches_per_epoch: Some(10),
        vae_warmup_epochs: 2,
        stage_a_epochs: 5,
        stage_b_epochs: 10,
        stage_c_epochs: 3,
        ablation,
        seed,
        ..AfnConfig::default()
    }
}

fn trained(seed: u64) -> (AfnModel, TimeSeriesSet) {
    let set = generate_synthetic(&SynthConfig::benchmark(300, 60, seed)).unwrap();
    let (train, test) = split(&set, 0.75, seed).unwrap();
    (train_afn(&train, &config(Ablation::default(), seed), None).unwrap(), test)
}

#[test]
fn every_ablation_trains_on_a_thousand_series() {
    let set = generate_synthetic(&SynthConfig::benchmark(1000, 30, 2)).unwrap();
    let (train, test) = split(&set, 0.75, 2).unwrap();
    let mut base = config(Ablation::default(), 2);
    base.batches_per_epoch = Some(3);
    base.stage_a_epochs = 1;
    base.stage_b_epochs = 2;
    base.stage_c_epochs = 1;
    let mut bundles = Vec::new();
    for label in ["none", "tm", "al", "df", "fft"] {
        let cfg = AfnConfig {
            ablation: Ablation::parse(label).unwrap(),
            ..base.clone()
        };
        let model = train_afn(&train, &cfg, None).unwrap();
        assert!(model.log.iter().all(|l| l.objective.is_finite()), "{label}");
        let mse = evaluate_mse(&model, &test, 6).unwrap();
        assert!(mse.is_finite() && mse > 0.0, "{label}: {mse}");
        assert_eq!(model.tm.is_none(), label == "tm");
        let f = model.forecast(test.series(0), 6).unwrap();
        assert_eq!(f.attention.is_none(), label == "al");
        if label == "df" || label == "tm" {
            assert!(f.damping.iter().all(|&d| d == 1.0));
        }
        bundles.push(serde_json::to_string(&f).unwrap());
    }
    // the fine-tuning stage changes the weights, so its ablation changes forecasts
    assert_ne!(bundles[0], bundles[4]);
}

#[test]
fn regime_share_dark_region_is_connected() {
    let (model, _) = trained(1);
    let set = generate_synthetic(&SynthConfig::benchmark(300, 60, 1)).unwrap();
    let (train, _) = split(&set, 0.75, 1).unwrap();
    let reps = node_representatives(&model, &train).unwrap();
    let scorer = RegimeShareScorer::fit(&model, &train, &[2]).unwrap();
    let map = set_risk_map(model.vae.grid(), &reps.x, &scorer).unwrap();
    let grid = map.grid();
    let dark: Vec<usize> = (0..grid.n_nodes()).filter(|&k| map.is_dark(k)).collect();
    assert!(!dark.is_empty() && dark.len() < grid.n_nodes());
    let mut seen = vec![dark[0]];
    let mut stack = vec![dark[0]];
    while let Some(k) = stack.pop() {
        let (i, j) = grid.coords(k);
        for (a, b) in [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)] {
            if a < grid.height && b < grid.width {
                let n = grid.index(a, b);
                if map.is_dark(n) && !seen.contains(&n) {
                    seen.push(n);
                    stack.push(n);
                }
            }
        }
    }
    assert_eq!(seen.len(), dark.len(), "dark nodes {dark:?}");
}

/// Regime switches in the benchmark are memoryless, so the pi history holds no
/// cue for an imminent switch; on this data the factor does not separate them.
#[test]
#[ignore = "studied, does not hold on memoryless switching; see the notes in the README"]
fn damping_is_lower_at_regime_switches() {
    let (model, test) = trained(3);
    let tm = model.tm.as_ref().unwrap();
    let norm = model.norm.apply(&test);
    let paths = tm.pi_paths(&norm).unwrap();
    let labels = test.regime_labels.as_ref().unwrap();
    let (mut sw, mut st) = (Vec::new(), Vec::new());
    for i in 0..test.n_series() {
        let path = paths.slice(s![i, .., ..]);
        for t in tm.tau() - 1..test.len() - 1 {
            let pi_hat = tm.dmm_predict(&tm.dmm_input(path, t)).unwrap();
            let f = model.damping(&path.row(t).to_vec(), &pi_hat).unwrap();
            if labels[[i, t + 1]] != labels[[i, t]] { sw.push(f) } else { st.push(f) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (at_switch, elsewhere) = (mean(&sw), mean(&st));
    eprintln!("damping at switches {at_switch:.4} ({}) elsewhere {elsewhere:.4} ({})", sw.len(), st.len());
    assert!(at_switch < elsewhere);
}

#[test]
#[ignore = "studied, attention does not localize injected changepoints at this scale; see the README"]
fn attention_finds_injected_changepoints() {
    let (model, _) = trained(5);
    let mut cfg = SynthConfig::benchmark(200, 60, 77);
    cfg.regime_transition_matrix = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    cfg.initial_distribution = Some(vec![1.0, 0.0, 0.0]);
    let a = generate_synthetic(&cfg).unwrap();
    cfg.initial_distribution = Some(vec![0.0, 0.0, 1.0]);
    cfg.seed = 78;
    let b = generate_synthetic(&cfg).unwrap();
    let mut hits = 0;
    for i in 0..200 {
        let cp = 20 + (i % 30);
        let series = concatenate(Axis(0), &[a.series(i).slice(s![..cp, ..]), b.series(i).slice(s![cp.., ..])]).unwrap();
        let f = model.forecast(series.view(), 6).unwrap();
        let w = f.attention.as_ref().unwrap();
        let arg = w[0].iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        if arg.abs_diff(cp) <= 2 { hits += 1; }
    }
    eprintln!("argmax attention within 2 steps of the changepoint: {hits}/200");
    assert!(hits >= 120);
}
