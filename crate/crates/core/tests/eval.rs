use irmkit::diff::Tensor;
use irmkit::envgen::{make_test_grid, make_training_envs, DataSource, EnvDataset, Resampling, Source};
use irmkit::eval::*;
use irmkit::methods::{init_for, BatchSize, Method, MethodConfig};
use irmkit::model::{self, Heads, Linear};

mod common;

use common::{probe_net, spurious_agreement_by_cells};

fn source() -> Source {
    Source::from_descriptor(&DataSource::default()).unwrap()
}

fn grid(n: usize, seed: u64) -> Vec<EnvDataset> {
    make_test_grid(0.25, &irmkit::envgen::default_beta_grid(), n, seed, &source()).unwrap()
}

#[test]
fn oracle_probes_on_the_grid() {
    let g = grid(10_000, 5);
    let inv = evaluate_grid(&probe_net(false), &g, InferenceMode::Shared).unwrap();
    for a in &inv.acc_per_beta {
        assert!((a - 0.75).abs() <= 0.01, "{a}");
    }
    let spu_net = probe_net(true);
    let spu = evaluate_grid(&spu_net, &g, InferenceMode::Shared).unwrap();
    for (env, a) in g.iter().zip(&spu.acc_per_beta) {
        let beta = env.spec.beta;
        assert!((a - (1.0 - beta)).abs() <= 0.01, "β={beta}: {a}");
        let closed = (1.0 - 0.25) * (1.0 - beta) + 0.25 * beta;
        assert!((closed - spurious_agreement_by_cells(0.25, beta)).abs() < 1e-15);
        let logits = spu_net.logits(model::HeadSelector::Default, &env.features).unwrap();
        let vs_group = accuracy_from_logits(&logits, &env.invariant_bits).unwrap();
        assert!((vs_group - closed).abs() <= 0.01, "β={beta}: {vs_group} vs {closed}");
    }
}

#[test]
fn constant_logit_is_chance() {
    let mut p = probe_net(false);
    p.heads = Heads::Shared(Linear { weight: Tensor::zeros(&[2, 1]), bias: Tensor::zeros(&[1]) });
    let d = &grid(10_000, 9)[3];
    let acc = accuracy(&p, d, InferenceMode::Shared).unwrap();
    let p0 = d.labels.iter().filter(|&&y| y == 0).count() as f64 / d.len() as f64;
    assert_eq!(acc, p0);
    let sigma = (0.25f64 / d.len() as f64).sqrt();
    assert!((acc - 0.5).abs() <= 3.0 * sigma);
}

#[test]
fn inference_mode_must_fit_heads() {
    let d = &grid(100, 1)[0];
    let shared = init_for(Method::Irmv0, 2, 4, 1, 2, 1).unwrap();
    let frozen = init_for(Method::Irmv1, 2, 4, 1, 2, 1).unwrap();
    let per = init_for(Method::Bloc, 2, 4, 1, 2, 1).unwrap();
    accuracy(&shared, d, InferenceMode::Shared).unwrap();
    accuracy(&frozen, d, InferenceMode::Shared).unwrap();
    assert!(accuracy(&shared, d, InferenceMode::ConsensusHead).is_err());
    assert!(accuracy(&per, d, InferenceMode::Shared).is_err());
    assert_eq!(InferenceMode::for_method(Method::IrmGame), InferenceMode::EnsembleMeanLogit);
    assert_eq!(InferenceMode::for_method(Method::BlocRex), InferenceMode::ConsensusHead);
    assert_eq!(InferenceMode::for_method(Method::Irmv1), InferenceMode::Shared);
}

#[test]
fn linear_heads_make_consensus_and_ensemble_agree() {
    let mut per = init_for(Method::IrmGame, 2, 4, 2, 3, 1).unwrap();
    if let Heads::PerEnv(hs) = &mut per.heads {
        for (i, h) in hs.iter_mut().enumerate() {
            h.weight = h.weight.map(|v| v * (1.0 + i as f64) - 0.1 * i as f64);
            h.bias = h.bias.map(|v| v + 0.05 * i as f64);
        }
    }
    let g = grid(2000, 2);
    let a = evaluate_grid(&per, &g, InferenceMode::EnsembleMeanLogit).unwrap();
    let b = evaluate_grid(&per, &g, InferenceMode::ConsensusHead).unwrap();
    for (x, y) in a.acc_per_beta.iter().zip(&b.acc_per_beta) {
        assert!((x - y).abs() <= 1.0 / 2000.0);
    }
}

#[test]
fn evaluation_is_read_only_and_repeatable() {
    let p = init_for(Method::Irmv1, 2, 8, 2, 2, 4).unwrap();
    let before = serde_json::to_vec(&p).unwrap();
    let g = grid(500, 3);
    let a = evaluate_grid(&p, &g, InferenceMode::Shared).unwrap();
    let b = evaluate_grid(&p, &g, InferenceMode::Shared).unwrap();
    assert_eq!(serde_json::to_vec(&p).unwrap(), before);
    assert_eq!(a, b);
    assert_eq!(a.betas, irmkit::envgen::default_beta_grid());
    assert!((a.avg_acc - a.acc_per_beta.iter().sum::<f64>() / 19.0).abs() < 1e-12);
}

#[test]
fn thread_count_does_not_matter() {
    let p = init_for(Method::Irmv0, 2, 8, 2, 2, 4).unwrap();
    let g = grid(500, 3);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_grid(&p, &g, InferenceMode::Shared).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn csv_round_trip() {
    let a = EvalReport::new(vec![0.05, 0.1], vec![0.7, 1.0 / 3.0]).unwrap().labeled("irmv1", 3, "d");
    let b = EvalReport::new(vec![0.05, 0.1], vec![0.6, 0.65]).unwrap().labeled("erm", 4, "d");
    let mut buf = Vec::new();
    write_accuracy_csv(&[a.clone(), b.clone()], &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("method,seed,beta,accuracy\n"));
    assert_eq!(text.lines().count(), 5);
    let back = read_accuracy_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].acc_per_beta, a.acc_per_beta);
    assert_eq!((back[1].method.as_str(), back[1].seed), ("erm", 4));
    assert_eq!(back[0].avg_acc, a.avg_acc);

    let mut s = Vec::new();
    write_summary_csv(&[a, b], &mut s).unwrap();
    let s = String::from_utf8(s).unwrap();
    assert_eq!(s.lines().next(), Some("method,seed,avg_acc,acc_gap"));
    assert_eq!(s.lines().count(), 3);
}

#[test]
fn sweeps() {
    let envs = make_training_envs(&[(0.25, 0.1), (0.25, 0.2)], 200, 1, &source(), &Resampling::default()).unwrap();
    let g = make_test_grid(0.25, &[0.1, 0.9], 200, 1, &source()).unwrap();
    let cfg = MethodConfig {
        method: Method::Irmv1,
        total_epochs: 2,
        warmup_epochs: 1,
        gamma: 10.0,
        batch_size: BatchSize::Fixed(50),
        ..MethodConfig::default()
    };
    let setup = SweepSetup { hidden_dim: 4, depth: 1, seed: 2, config_digest: "x".into() };

    assert!(batch_size_sweep(&cfg, &[], &setup, &envs, &g).is_err());
    assert!(model_size_sweep(&cfg, &[], &setup, &envs, &g).is_err());

    let one = batch_size_sweep(&cfg, &[BatchSize::Fixed(50)], &setup, &envs, &g).unwrap();
    assert_eq!(one.len(), 1);
    let two = batch_size_sweep(&cfg, &[BatchSize::Fixed(50), BatchSize::Full], &setup, &envs, &g).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two[0], one[0]);
    assert_ne!(two[0].acc_per_beta, two[1].acc_per_beta);
    assert!(two.iter().all(|r| r.method == "irmv1" && r.seed == 2 && r.config_digest == "x"));

    let dims = model_size_sweep(&cfg, &[3, 5], &setup, &envs, &g).unwrap();
    assert_eq!(dims.len(), 2);
}
