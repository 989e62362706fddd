use std::fs;
use std::path::Path;

use irmkit::error::Error;
use irmkit::eval::{read_accuracy_csv, EvalReport};
use irmkit::experiment::*;
use irmkit::model::load_checkpoint;
use serde_json::Value;

fn small(dir: &Path, method: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "small"
output_dir = {dir:?}
trials = [3, 4]
[data]
n_per_env = 200
train = [{{ alpha = 0.25, beta = 0.1 }}, {{ alpha = 0.25, beta = 0.2 }}]
[data.test]
betas = [0.1, 0.5, 0.9]
n_per_env = 300
[model]
hidden_dim = 4
depth = 1
[method]
method = "{method}"
gamma = 10.0
warmup_epochs = 1
total_epochs = 2
batch_size = 50
{extra}
"#
    );
    let c = ExperimentConfig::from_str_with(&text, false).unwrap();
    c.validate().unwrap();
    c
}

fn leaves(v: &Value, path: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                path.push(k.clone());
                leaves(x, path, out);
                path.pop();
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                path.push(i.to_string());
                leaves(x, path, out);
                path.pop();
            }
        }
        Value::Null => {}
        _ => out.push(path.clone()),
    }
}

fn at<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |v, k| match v {
        Value::Array(a) => &mut a[k.parse::<usize>().unwrap()],
        v => &mut v[k.as_str()],
    })
}

fn perturbed(v: &Value) -> Vec<Value> {
    match v {
        Value::Bool(b) => vec![Value::Bool(!b)],
        Value::Number(n) if n.is_u64() => vec![(n.as_u64().unwrap() + 1).into()],
        Value::Number(n) => {
            let x = n.as_f64().unwrap();
            vec![(x * 0.5).into(), (x + 0.01).into()]
        }
        Value::String(s) => {
            let mut alts: Vec<Value> = ["erm", "irmv0", "rex", "per_env", "shared", "split_batch", "sam", "sgd"]
                .iter()
                .filter(|a| *a != s)
                .map(|a| Value::String(a.to_string()))
                .collect();
            alts.push(Value::String(format!("{s}x")));
            alts
        }
        _ => vec![],
    }
}

#[test]
fn every_config_field_moves_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path(), "irmv1", "");
    let json = serde_json::to_value(&base).unwrap();
    let mut paths = Vec::new();
    leaves(&json, &mut Vec::new(), &mut paths);
    assert!(paths.len() > 30, "{}", paths.len());
    let mut checked = 0;
    for p in &paths {
        let mut hit = false;
        let orig = at(&mut json.clone(), p).clone();
        for alt in perturbed(&orig).into_iter().filter(|a| *a != orig) {
            let mut v = json.clone();
            *at(&mut v, p) = alt;
            let Ok(c) = ExperimentConfig::from_str_with(&v.to_string(), true) else { continue };
            hit = true;
            if p[0] == "output_dir" {
                assert_eq!(c.digest(), base.digest());
            } else {
                assert_ne!(c.digest(), base.digest(), "field {}", p.join("."));
            }
        }
        checked += usize::from(hit);
    }
    assert!(checked * 10 >= paths.len() * 9, "{checked} of {}", paths.len());
}

#[test]
fn runs_are_reproducible_to_the_bit() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&small(a.path(), "irmv1", "")).unwrap();
    let rb = run(&small(b.path(), "irmv1", "")).unwrap();
    assert_eq!(ra.iter().map(|r| r.seed).collect::<Vec<_>>(), [3, 4]);
    assert_eq!(ra, rb);
    assert_ne!(ra[0].acc_per_beta, ra[1].acc_per_beta);
    for f in ["accuracy.csv", "summary.csv", "diagnostics_seed3.jsonl", "checkpoint_seed3.bin", "checkpoint_seed4.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let back = read_accuracy_csv(fs::File::open(a.path().join("accuracy.csv")).unwrap()).unwrap();
    assert_eq!(back[1].acc_per_beta, ra[1].acc_per_beta);
    let diag = fs::read_to_string(a.path().join("diagnostics_seed4.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 2);
    let (_, meta) = load_checkpoint(&a.path().join("checkpoint_seed3.json")).unwrap();
    assert_eq!(meta.seed, 3);
    let m: Value = serde_json::from_slice(&fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "complete");
    assert_eq!(m["config_digest"], ra[0].config_digest);
    assert_eq!(m["completed_trials"], serde_json::json!([3, 4]));
}

#[test]
fn per_env_methods_run_end_to_end() {
    for m in ["bloc", "irm_game", "bloc_rex"] {
        let d = tempfile::tempdir().unwrap();
        let r = run(&small(d.path(), m, "")).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].method, m);
    }
}

#[test]
fn divergence_names_the_seed_and_keeps_finished_trials() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small(d.path(), "irmv0", "[optim]\nkind = \"sgd\"\nbase_lr = 1e200\n");
    cfg.method.warmup_epochs = 0;
    let e = run(&cfg).unwrap_err();
    assert!(matches!(e, Error::TrialFailed { seed: 3, .. }), "{e}");
    assert_eq!(exit_code(&e), 3);
    assert!(e.to_string().contains("seed 3"));
    let m: Value = serde_json::from_slice(&fs::read(d.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert!(d.path().join("accuracy.csv").exists());
}

#[test]
fn bad_configs_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    let base = small(d.path(), "irmv1", "");
    let mut over = base.clone();
    over.method.batch_size = irmkit::methods::BatchSize::Fixed(10_000);
    let mut betas = base.clone();
    betas.data.test.betas = vec![0.5, 0.1];
    let mut dup = base.clone();
    dup.trials = vec![1, 1];
    let mut none = base.clone();
    none.data.train.clear();
    for c in [over, betas, dup, none] {
        let e = c.validate().unwrap_err();
        assert_eq!(exit_code(&e), 2, "{e}");
    }
    let typo = "output_dir = \"x\"\n[data]\ntrain = []\n[method]\nmethod = \"irmv1\"\ngamma_typo = 1\n";
    assert_eq!(exit_code(&ExperimentConfig::from_str_with(typo, false).unwrap_err()), 2);
}

#[test]
fn seed_override_and_file_formats() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small(d.path(), "erm", "");
    let toml_path = d.path().join("c.toml");
    let json_path = d.path().join("c.json");
    fs::write(&toml_path, toml::to_string(&cfg).unwrap()).unwrap();
    fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&toml_path).unwrap(), cfg);
    assert_eq!(ExperimentConfig::load(&json_path).unwrap(), cfg);
    // The only test touching the variable.
    std::env::set_var(SEED_ENV_VAR, "17");
    let over = ExperimentConfig::load(&toml_path);
    std::env::set_var(SEED_ENV_VAR, "x");
    let bad = ExperimentConfig::load(&toml_path);
    std::env::remove_var(SEED_ENV_VAR);
    assert_eq!(over.unwrap().trials, [17]);
    assert_eq!(exit_code(&bad.unwrap_err()), 2);
}

fn report(method: &str, seed: u64, betas: &[f64], accs: &[f64]) -> EvalReport {
    EvalReport::new(betas.to_vec(), accs.to_vec()).unwrap().labeled(method, seed, "")
}

#[test]
fn comparison_aggregates_by_method() {
    let rs = [
        report("erm", 0, &[0.1, 0.9], &[0.9, 0.1]),
        report("irmv1", 0, &[0.1, 0.9], &[0.75, 0.73]),
        report("erm", 1, &[0.1, 0.9], &[0.8, 0.2]),
    ];
    let c = compare_reports(&rs).unwrap();
    assert!(c.warnings.is_empty());
    assert_eq!(c.rows.len(), 2);
    let erm = &c.rows[0];
    assert_eq!((erm.method.as_str(), erm.trials), ("erm", 2));
    assert!((erm.avg_acc.0 - 0.5).abs() < 1e-12 && erm.avg_acc.1.abs() < 1e-12);
    assert!((erm.acc_gap.0 - 0.7).abs() < 1e-12);
    assert!((erm.acc_gap.1 - 0.2f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(c.rows[1].acc_gap.1, 0.0);
    assert!((erm.acc_per_beta[0].unwrap() - 0.85).abs() < 1e-12);
    let table = c.table();
    assert!(table.contains("50.00 ± 0.00") && table.contains("irmv1"), "{table}");

    let one = compare_reports(&rs[1..2]).unwrap();
    assert_eq!(one.rows[0].avg_acc, (0.74, 0.0));

    let mixed = compare_reports(&[rs[0].clone(), report("rex", 0, &[0.1, 0.5], &[0.7, 0.7])]).unwrap();
    assert_eq!(mixed.betas, [0.1, 0.5, 0.9]);
    assert_eq!(mixed.warnings.len(), 1);
    assert_eq!(mixed.rows[1].acc_per_beta, [Some(0.7), Some(0.7), None]);
    let mut csv = Vec::new();
    mixed.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("method,trials,avg_acc_mean,avg_acc_std,acc_gap_mean,acc_gap_std,acc@0.1,acc@0.5,acc@0.9\n"));
    assert!(csv.lines().nth(2).unwrap().ends_with("0.7,0.7,"));

    assert!(compare_reports(&[]).is_err());
}

#[test]
fn compare_reads_run_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&small(a.path(), "erm", "")).unwrap();
    run(&small(b.path(), "irmv1", "")).unwrap();
    let c = compare(&[a.path().to_path_buf(), b.path().join("accuracy.csv")]).unwrap();
    assert_eq!(c.rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["erm", "irmv1"]);
    assert!(c.rows.iter().all(|r| r.trials == 2));
    assert!(compare(&[a.path().join("missing.csv")]).is_err());
}

#[test]
fn sweeps_write_one_row_per_point() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = small(d.path(), "irmv1", "[sweep]\nbatch_sizes = [50, \"full\"]\nhidden_dims = [3, 5, 7]\n");
    cfg.trials = vec![1];
    assert_eq!(sweep(&cfg, SweepParam::BatchSize).unwrap().len(), 2);
    let s = fs::read_to_string(d.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(s.lines().count(), 3);
    assert!(s.lines().nth(2).unwrap().starts_with("batch_size,full,irmv1,1,"));
    let pts = sweep(&cfg, SweepParam::HiddenDim).unwrap();
    assert_eq!(pts.iter().map(|p| p.value.as_str()).collect::<Vec<_>>(), ["3", "5", "7"]);
    let a = fs::read_to_string(d.path().join("sweep_accuracy.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 3 * 3);
    cfg.sweep.hidden_dims.clear();
    assert_eq!(exit_code(&sweep(&cfg, SweepParam::HiddenDim).unwrap_err()), 2);
    assert!("depth".parse::<SweepParam>().is_err());
}

#[test]
fn reference_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let c = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert_eq!(c.trials.len(), 10, "{}", p.display());
            assert_eq!(c.data.test.betas.len(), 19);
            n += 1;
        }
    }
    assert!(n >= 30);
}
