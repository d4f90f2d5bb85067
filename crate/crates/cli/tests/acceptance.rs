//! Headless acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails. Thresholds are fixed here and
//! never read from the environment.
//!
//! Set `XIL_ACCEPTANCE_OUT=<dir>` to keep the experiment directories.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xil_cli::run::{run_experiment, seed_dir, Summary};
use xil_core::data::{
    confounded_two_feature, neutralize_background, ChannelMeans, Dataset, DatasetManifest, NeutralizeMode, Role,
};
use xil_core::experiment::ExperimentManifest;
use xil_core::explain::{stable_lime, ComponentScheme, LimeParams};
use xil_core::feedback::{evaluate_rrr_terms, rrr_loss, to_counterexamples, CeStrategy, CeVariant, Correction, FeatureStats};
use xil_core::gradcheck::{central_difference, relative_error};
use xil_core::models::{
    train, Architecture, Classifier, LabeledSet, Lambda1, LossSpec, Model, ModelSpec, OptimSpec, RrrTarget,
};
use xil_core::session::Strategy;
use xil_core::spray::{matched_agreement, run_spray, template_heatmaps, SprayConfig};
use xil_core::tensor::Tensor;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: u32,
    pass: bool,
    line: String,
}

fn verdict(id: u32, pass: bool, line: String) -> Verdict {
    println!("criterion {id} [{}] {line}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, line }
}

fn error(id: u32, e: impl std::fmt::Display) -> Verdict {
    verdict(id, false, format!("error: {e}"))
}

fn manifest(name: &str, strategy: Strategy) -> ExperimentManifest {
    serde_json::from_value(serde_json::json!({
        "name": name,
        "dataset": { "preset": "decoy" },
        "strategy": strategy,
        "seeds": SEEDS,
    }))
    .expect("manifest")
}

struct Run {
    dir: PathBuf,
    summary: Summary,
    secs: f64,
}

fn run(out: &Path, name: &str, strategy: Strategy) -> anyhow::Result<Run> {
    let dir = out.join(name);
    let t = Instant::now();
    let summary = run_experiment(&manifest(name, strategy), Path::new("."), &dir, None)?;
    let secs = t.elapsed().as_secs_f64();
    anyhow::ensure!(summary.ok(), "failed seeds: {:?}", summary.failed);
    Ok(Run { dir, summary, secs })
}

fn tests(s: &Summary) -> Vec<f64> {
    s.seeds.iter().map(|o| o.test_accuracy).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/")
}

fn criterion_1(none: &Run) -> Verdict {
    // every seed must show the effect; runtime is the full three-seed run
    let mut ok = none.secs <= 120.0;
    for o in &none.summary.seeds {
        ok &= o.train_accuracy >= 0.90 && o.test_accuracy <= 0.70 && o.train_accuracy - o.test_accuracy > 0.20;
    }
    let train: Vec<f64> = none.summary.seeds.iter().map(|o| o.train_accuracy).collect();
    verdict(
        1,
        ok,
        format!(
            "decoy effect: train {} (>= 0.90), test {} (<= 0.70), gap > 0.20, {:.1} s for 3 seeds (<= 120 s)",
            fmt(&train),
            fmt(&tests(&none.summary)),
            none.secs
        ),
    )
}

fn criterion_2(none: &Run, ce1: &Run, ce5: &Run, rrr: &Run) -> Verdict {
    let base = none.summary.test_accuracy.mean;
    let (c1, c5, r) = (
        ce1.summary.test_accuracy.mean,
        ce5.summary.test_accuracy.mean,
        rrr.summary.test_accuracy.mean,
    );
    let secs = ce1.secs + ce5.secs + rrr.secs;
    let ok = c1 >= base + 0.20 && c1 >= 0.80 && r >= base + 0.20 && r >= 0.80 && c5 >= c1 - 0.02 && secs <= 600.0;
    verdict(
        2,
        ok,
        format!(
            "3-seed mean test accuracy: none {base:.3}, ce-c1 {c1:.3} [{}], ce-c5 {c5:.3} [{}], rrr {r:.3} [{}]; \
             need ce-c1, rrr >= max(none + 0.20, 0.80) and ce-c5 >= ce-c1 - 0.02; {secs:.1} s (<= 600 s)",
            fmt(&tests(&ce1.summary)),
            fmt(&tests(&ce5.summary)),
            fmt(&tests(&rrr.summary)),
        ),
    )
}

fn test_split(seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    Ok(DatasetManifest::decoy_preset(seed).build(Path::new("."))?)
}

fn load(run: &Run, seed: u64) -> anyhow::Result<Model> {
    Ok(Model::load(&seed_dir(&run.dir, seed).join("model.json"))?)
}

fn criterion_3(none: &Run, rrr: &Run) -> anyhow::Result<Verdict> {
    let mut ratios = Vec::new();
    for &seed in &SEEDS {
        let (_, test) = test_split(seed)?;
        let held_out = test.labeled_set();
        anyhow::ensure!(held_out.has_nonzero_mask(), "test split has no decoy masks");
        let w = vec![1.0; test.classes];
        let (_, r_none) = evaluate_rrr_terms(&load(none, seed)?, &held_out, &w, RrrTarget::Input)?;
        let (_, r_rrr) = evaluate_rrr_terms(&load(rrr, seed)?, &held_out, &w, RrrTarget::Input)?;
        ratios.push(r_rrr / r_none);
    }
    let ok = ratios.iter().all(|&q| q <= 0.10);
    Ok(verdict(
        3,
        ok,
        format!("held-out reasons term, rrr / none per seed: {} (<= 0.10)", fmt(&ratios)),
    ))
}

fn criterion_4(none: &Run, rrr: &Run) -> anyhow::Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [NeutralizeMode::RegionMean, NeutralizeMode::GlobalMean] {
        let (mut a_none, mut a_rrr) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let (train_set, test) = test_split(seed)?;
            let means = ChannelMeans::fit(&train_set.x, train_set.masks.as_ref().expect("train masks"))?;
            let x = neutralize_background(&test.x, test.masks.as_ref().expect("test masks"), mode, &means)?;
            let n = load(none, seed)?.accuracy(&x, &test.labels)?;
            let r = load(rrr, seed)?.accuracy(&x, &test.labels)?;
            ok &= r > n;
            a_none.push(n);
            a_rrr.push(r);
        }
        parts.push(format!("{mode:?}: none {} vs rrr {}", fmt(&a_none), fmt(&a_rrr)));
    }
    Ok(verdict(4, ok, format!("neutralized test accuracy, rrr > none in every seed; {}", parts.join("; "))))
}

fn random_network(rng: &mut ChaCha8Rng, i: usize) -> ModelSpec {
    let classes = rng.gen_range(2..=3);
    if i < 7 {
        let mut widths = vec![rng.gen_range(2..=6)];
        for _ in 0..rng.gen_range(1..=2) {
            widths.push(rng.gen_range(2..=6));
        }
        widths.push(classes);
        ModelSpec::mlp(widths)
    } else {
        ModelSpec {
            architecture: Architecture::Cnn {
                conv_channels: vec![2, 3],
                kernel: 3,
                pool: 2,
                dense: vec![4],
            },
            input_shape: vec![1, 6, 6],
            classes,
        }
    }
}

fn max_grad_error(model: &Model, batch: &LabeledSet, lambda1: f64, lambda2: f64) -> anyhow::Result<f64> {
    let w = vec![1.0; model.spec.classes];
    let analytic = rrr_loss(model, batch, lambda1, lambda2, &w, RrrTarget::Input)?;
    let mut worst = 0.0f64;
    for p in 0..model.params.len() {
        let mut probe = model.clone();
        let numeric = central_difference(&model.params[p], 1e-5, |t| {
            probe.params[p] = t.clone();
            rrr_loss(&probe, batch, lambda1, lambda2, &w, RrrTarget::Input).expect("finite loss").loss
        });
        worst = worst.max(relative_error(&analytic.grads[p], &numeric));
    }
    Ok(worst)
}

fn criterion_5() -> anyhow::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for i in 0..10 {
        let spec = random_network(&mut rng, i);
        let mut model = Model::init(spec.clone(), i as u64)?;
        // init leaves biases at exactly zero, which puts a relu fed only by
        // dead units on its kink; jitter every parameter off it
        for t in &mut model.params {
            let jittered = t.data().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            *t = Tensor::new(t.shape().to_vec(), jittered)?;
        }
        let n = 4;
        let mut shape = vec![n];
        shape.extend(&spec.input_shape);
        let len: usize = shape.iter().product();
        let x = Tensor::new(shape.clone(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let masks = Tensor::new(shape, (0..len).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect())?;
        let labels = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
        let batch = LabeledSet { x, labels, masks: Some(masks) };
        first = first.max(max_grad_error(&model, &batch, 0.0, 0.01)?);
        second = second.max(max_grad_error(&model, &batch, 1.0, 0.01)?);
    }
    Ok(verdict(
        5,
        first <= 1e-4 && second <= 1e-3,
        format!("10 networks (7 MLP, 3 CNN): first-order rel err {first:.2e} (<= 1e-4), through reasons term {second:.2e} (<= 1e-3)"),
    ))
}

/// `p1 = 0.5 + sum_j c_j x_j`, so component `j` moves the class-1
/// probability by exactly `c_j x_j` when switched to the zero baseline.
struct Linear {
    coef: Vec<f64>,
    shape: Vec<usize>,
}

impl Classifier for Linear {
    fn classes(&self) -> usize {
        2
    }

    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn predict_proba(&self, batch: &Tensor) -> xil_core::models::Result<Tensor> {
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let p1 = 0.5 + batch.row(i).iter().zip(&self.coef).map(|(x, c)| x * c).sum::<f64>();
            out.extend([1.0 - p1, p1]);
        }
        Ok(Tensor::new(vec![n, 2], out).expect("probabilities stay finite"))
    }
}

fn criterion_6() -> anyhow::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = 0;
    let mut total = 0;
    for m in 0..20 {
        let d = rng.gen_range(4..=16);
        let k = rng.gen_range(1..=3.min(d - 1));
        let x = Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(0.5..1.5)).collect())?;
        // keep probabilities inside [0, 1] for every perturbation
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale = 0.45 / raw.iter().zip(x.data()).map(|(c, v)| (c * v).abs()).sum::<f64>();
        let model = Linear {
            coef: raw.iter().map(|c| c * scale).collect(),
            shape: vec![d],
        };

        // oracle: switch each component off alone and measure the change
        let full = model.predict_proba(&x.reshape(vec![1, d])?)?.data()[1];
        let mut effect: Vec<(f64, usize)> = (0..d)
            .map(|j| {
                let mut z = x.data().to_vec();
                z[j] = 0.0;
                let p = model.predict_proba(&Tensor::new(vec![1, d], z).unwrap()).unwrap().data()[1];
                ((full - p).abs(), j)
            })
            .collect();
        effect.sort_by(|a, b| b.0.total_cmp(&a.0));
        let truth: Vec<usize> = effect[..k].iter().map(|e| e.1).collect();

        let params = LimeParams {
            k,
            seed: m,
            baseline: Some(vec![0.0; d]),
            ..LimeParams::default()
        };
        let e = stable_lime(&model, &x, &ComponentScheme::tabular(d)?, &params, 5)?;
        hits += e.top_k.iter().filter(|j| truth.contains(j)).count();
        total += k;
    }
    let precision = hits as f64 / total as f64;
    Ok(verdict(
        6,
        precision == 1.0,
        format!("stable LIME top-k precision over 20 linear models (d 4..16): {precision:.3} (== 1.0)"),
    ))
}

/// Effective confounder weight: change in the class-1 margin per unit of
/// feature 2, independent of the parameter layout.
fn confounder_weight(model: &Model) -> anyhow::Result<f64> {
    let l = model.logits(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0])?)?;
    let margin = |r: usize| l.row(r)[1] - l.row(r)[0];
    Ok((margin(1) - margin(0)).abs())
}

fn criterion_7() -> anyhow::Result<Verdict> {
    let train_set = confounded_two_feature(200, 7, Role::Train)?;
    let test = confounded_two_feature(1000, 8, Role::Test)?;
    let optim = OptimSpec {
        l2: 1e-3,
        ..OptimSpec::adam(0.05, 32, 100)
    };
    let init = Model::init(ModelSpec::logreg(2, 2), 7)?;

    let mut plain = init.clone();
    train(&mut plain, &train_set.labeled_set(), &LossSpec::cross_entropy(), &optim)?;

    let scheme = ComponentScheme::tabular(2)?;
    let stats = FeatureStats::fit(&train_set.x);
    let strategy = CeStrategy {
        variant: CeVariant::Randomize,
        count: 1,
    };
    let mut x = train_set.x.data().to_vec();
    let mut labels = train_set.labels.clone();
    for i in 0..train_set.len() {
        let c = Correction::new(train_set.ids[i], train_set.labels[i], vec![1]);
        let ces = to_counterexamples(
            &train_set.instance(i),
            &c,
            strategy,
            &scheme,
            &train_set.x,
            &train_set.labels,
            &stats,
            i as u64,
        )?;
        for (t, y) in ces {
            x.extend(t.data());
            labels.push(y);
        }
    }
    let augmented = LabeledSet {
        x: Tensor::new(vec![labels.len(), 2], x)?,
        labels,
        masks: None,
    };
    let mut corrected = init;
    train(&mut corrected, &augmented, &LossSpec::cross_entropy(), &optim)?;

    let (w0, w1) = (confounder_weight(&plain)?, confounder_weight(&corrected)?);
    let (a0, a1) = (plain.accuracy(&test.x, &test.labels)?, corrected.accuracy(&test.x, &test.labels)?);
    let shrink = 1.0 - w1 / w0;
    Ok(verdict(
        7,
        shrink >= 0.5 && a1 > a0,
        format!("|w2| {w0:.3} -> {w1:.3} (shrink {:.1}% >= 50%), clean test accuracy {a0:.3} -> {a1:.3} (strictly up)", 100.0 * shrink),
    ))
}

fn criterion_8() -> anyhow::Result<Verdict> {
    let (maps, truth) = template_heatmaps(200, 0.05, 8);
    let report = run_spray(&maps, None, &SprayConfig::default())?;
    let agreement = matched_agreement(&report.labels, &truth);
    let in_range = report.eigenvalues.iter().all(|&l| (-1e-9..=2.0 + 1e-9).contains(&l));
    let monotone = report.kl_tail.len() == 100 && report.kl_tail.windows(2).all(|w| w[1] <= w[0]);
    Ok(verdict(
        8,
        report.k == 2 && agreement >= 0.95 && in_range && monotone,
        format!(
            "k {} (== 2), agreement {agreement:.3} (>= 0.95), eigenvalues in [0, 2] +- 1e-9: {in_range}, \
             KL non-increasing over last 100 iterations: {monotone} (final {:.4})",
            report.k, report.kl_final
        ),
    ))
}

fn criterion_9(runs: &[&Run], scratch: &Path) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for run in runs {
        let dir = seed_dir(&run.dir, 0);
        let out = scratch.join(format!("replay-{}", run.summary.strategy));
        let status = Command::new(env!("CARGO_BIN_EXE_xil"))
            .arg("replay")
            .arg(&dir)
            .arg("--out")
            .arg(&out)
            .output();
        let same = match status {
            Ok(o) => {
                o.status.success()
                    && std::fs::read(dir.join("metrics.csv")).ok() == std::fs::read(out.join("metrics.csv")).ok()
            }
            Err(_) => false,
        };
        ok &= same;
        parts.push(format!("{} {}", run.summary.strategy, if same { "identical" } else { "DIFFERS" }));
    }
    verdict(9, ok, format!("`xil replay` metrics.csv byte comparison: {}", parts.join(", ")))
}

fn main() {
    let keep = std::env::var_os("XIL_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let t = Instant::now();
    let mut verdicts = Vec::new();

    let rrr_strategy = Strategy::Rrr {
        lambda1: Lambda1::Auto { default: 1.0 },
        lambda2: 0.0,
        target: RrrTarget::Input,
    };
    let ce = |count| {
        Strategy::Ce(CeStrategy {
            variant: CeVariant::Randomize,
            count,
        })
    };
    let runs = (|| -> anyhow::Result<_> {
        Ok((
            run(&out, "none", Strategy::None)?,
            run(&out, "ce-c1", ce(1))?,
            run(&out, "ce-c5", ce(5))?,
            run(&out, "rrr", rrr_strategy)?,
        ))
    })();
    match &runs {
        Ok((none, ce1, ce5, rrr)) => {
            verdicts.push(criterion_1(none));
            verdicts.push(criterion_2(none, ce1, ce5, rrr));
            verdicts.push(criterion_3(none, rrr).unwrap_or_else(|e| error(3, e)));
            verdicts.push(criterion_4(none, rrr).unwrap_or_else(|e| error(4, e)));
        }
        Err(e) => {
            for id in 1..=4 {
                verdicts.push(error(id, format!("decoy experiments: {e:#}")));
            }
        }
    }
    verdicts.push(criterion_5().unwrap_or_else(|e| error(5, e)));
    verdicts.push(criterion_6().unwrap_or_else(|e| error(6, e)));
    verdicts.push(criterion_7().unwrap_or_else(|e| error(7, e)));
    verdicts.push(criterion_8().unwrap_or_else(|e| error(8, e)));
    match &runs {
        Ok((none, ce1, ce5, rrr)) => verdicts.push(criterion_9(&[none, ce1, ce5, rrr], &out)),
        Err(e) => verdicts.push(error(9, format!("no persisted sessions: {e:#}"))),
    }

    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    println!(
        "acceptance: {}/{} criteria pass in {:.1} s",
        verdicts.len() - failed.len(),
        verdicts.len(),
        t.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for v in verdicts.iter().filter(|v| !v.pass) {
            eprintln!("criterion {} failed: {}", v.id, v.line);
        }
        std::process::exit(1);
    }
}
