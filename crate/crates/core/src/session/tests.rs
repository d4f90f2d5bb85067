use proptest::prelude::{prop, proptest, ProptestConfig};

use super::*;
use crate::data::{toy_color_dataset, Role};
use crate::feedback::{CeVariant, FeedbackLog};

fn toy(n: usize, seed: u64) -> (Dataset, Dataset) {
    (
        toy_color_dataset(n, seed, Role::Train).unwrap(),
        toy_color_dataset(n, seed + 1, Role::Test).unwrap(),
    )
}

fn ce(count: usize) -> Strategy {
    Strategy::Ce(CeStrategy {
        variant: CeVariant::Randomize,
        count,
    })
}

fn rrr() -> Strategy {
    Strategy::Rrr {
        lambda1: Lambda1::Auto { default: 1.0 },
        lambda2: 0.0,
        target: RrrTarget::Input,
    }
}

fn session(strategy: Strategy, budget: usize) -> Session {
    let (train, test) = toy(60, 3);
    let config = LoopConfig {
        budget: Some(budget),
        ..LoopConfig::toy(strategy, 7)
    };
    Session::from_datasets(train, test, &ModelPreset::Logreg, config).unwrap()
}

/// Answers `n` queries through `inner`, then has nothing more to say.
struct Limited<O> {
    inner: O,
    left: usize,
}

impl<O: UserOracle> UserOracle for Limited<O> {
    fn respond(&mut self, q: &QueryArtifact, s: &ComponentScheme) -> Result<Option<Correction>> {
        if self.left == 0 {
            return Ok(None);
        }
        self.left -= 1;
        self.inner.respond(q, s)
    }
}

#[test]
fn zero_budget_only_fits() {
    let s = session(ce(1), 0);
    assert_eq!(s.state(), SessionState::Done);
    assert_eq!(s.metrics().len(), 1);
    assert_eq!(s.labeled_len(), 20);
    assert_eq!(s.pool_ids().len(), 40);
    assert!(s.metrics()[0].train_accuracy > 0.5);
}

#[test]
fn right_for_the_right_reasons_adds_one() {
    for strategy in [ce(3), rrr(), Strategy::None] {
        let mut s = session(strategy.clone(), 3);
        let q = s.next_query().unwrap();
        let before = s.labeled_len();
        s.submit(&Correction::new(q.instance_id, q.prediction, vec![])).unwrap();
        assert_eq!(s.labeled_len(), before + 1, "{strategy:?}");
        let set = s.labeled_set();
        match strategy {
            Strategy::Rrr { .. } => {
                let m = set.masks.unwrap();
                assert_eq!(m.shape(), &[before + 1, 3, 3]);
                assert!(m.row(before).iter().all(|&v| v == 0.0));
            }
            _ => assert!(set.masks.is_none()),
        }
    }
}

#[test]
fn ce_adds_counterexamples_and_rrr_adds_masks() {
    let mut s = session(ce(2), 3);
    let q = s.next_query().unwrap();
    s.submit(&Correction::new(q.instance_id, 1, vec![6, 0])).unwrap();
    assert_eq!(s.labeled_len(), 20 + 1 + 2 * 2);
    assert!(s.labeled_set().labels[20..].iter().all(|&y| y == 1));

    let mut s = session(rrr(), 3);
    let q = s.next_query().unwrap();
    s.submit(&Correction::new(q.instance_id, 0, vec![6])).unwrap();
    assert_eq!(s.labeled_len(), 21);
    let m = s.labeled_set().masks.unwrap();
    assert_eq!(m.row(20), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn state_machine() {
    let mut s = session(ce(1), 2);
    assert!(matches!(
        s.submit(&Correction::new(0, 0, vec![])),
        Err(LoopError::WrongState(_))
    ));
    let q = s.next_query().unwrap();
    assert!(s.pool_ids().contains(&q.instance_id));
    assert!(!s.labeled_ids().contains(&q.instance_id));
    assert!(matches!(s.next_query(), Err(LoopError::WrongState(_))));
    let other = s.pool_ids().into_iter().find(|&i| i != q.instance_id).unwrap();
    assert!(matches!(
        s.submit(&Correction::new(other, 0, vec![])),
        Err(LoopError::InstanceMismatch { .. })
    ));
    assert!(matches!(
        s.submit(&Correction::new(q.instance_id, 2, vec![])),
        Err(LoopError::BadLabel { .. })
    ));
    assert!(matches!(
        s.submit(&Correction::new(q.instance_id, 0, vec![9])),
        Err(LoopError::Feedback(FeedbackError::InvalidComponent { index: 9, .. }))
    ));
    // Rejected submissions leave the query outstanding.
    assert_eq!(s.state(), SessionState::AwaitingFeedback);
    s.submit(&Correction::new(q.instance_id, 0, vec![])).unwrap();
    let q = s.next_query().unwrap();
    let out = s.submit(&Correction::new(q.instance_id, 0, vec![])).unwrap();
    assert!(out.done);
    assert!(matches!(s.next_query(), Err(LoopError::WrongState("done"))));
    assert_eq!(s.metrics().len(), 3);
}

#[test]
fn query_explains_its_prediction() {
    let mut s = session(rrr(), 1);
    let q = s.next_query().unwrap();
    assert_eq!(q.explanation.class, q.prediction);
    assert_eq!(q.explanation.weights.len(), 9);
    assert!((q.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(q.confidence, q.probabilities[q.prediction]);
}

#[test]
fn simulated_run_finishes_and_keeps_pools_disjoint() {
    let mut s = session(ce(1), 8);
    let truth = s.train_set().clone();
    let status = run_xil(&mut s, &mut SimulatedOracle::new(&truth)).unwrap();
    assert_eq!(status, RunStatus::Finished);
    assert_eq!(s.step(), 8);
    assert_eq!(s.metrics().len(), 9);
    let pool: BTreeSet<u64> = s.pool_ids().into_iter().collect();
    assert!(pool.is_disjoint(s.labeled_ids()));
    assert_eq!(pool.len() + s.labeled_ids().len(), 60);
}

#[test]
fn stop_accuracy_ends_early() {
    let (train, test) = toy(60, 3);
    let config = LoopConfig {
        stop_acc: Some(0.0),
        ..LoopConfig::toy(ce(1), 7)
    };
    let mut s = Session::from_datasets(train.clone(), test, &ModelPreset::Logreg, config).unwrap();
    run_xil(&mut s, &mut SimulatedOracle::new(&train)).unwrap();
    assert_eq!(s.step(), 1);
}

#[test]
fn oracle_errors_abort() {
    let mut s = session(ce(1), 3);
    let mut oracle = SimulatedOracle::new(&toy(5, 99).0.subset(&[]));
    let err = run_xil(&mut s, &mut oracle).unwrap_err();
    assert!(matches!(err, LoopError::OracleFailure(_)), "{err}");
    assert_eq!(s.step(), 0);
}

#[test]
fn warm_start_and_full_refit_differ_but_both_work() {
    let (train, test) = toy(60, 3);
    let mut a = LoopConfig::toy(rrr(), 1);
    a.refit = RefitMode::Full;
    let mut s = Session::from_datasets(train.clone(), test, &ModelPreset::Logreg, a).unwrap();
    run_xil(&mut s, &mut SimulatedOracle::new(&train)).unwrap();
    assert_eq!(s.metrics().len(), 6);
    assert_eq!(s.model().epochs, 20);
}

fn spec(strategy: Strategy, budget: usize) -> SessionSpec {
    SessionSpec {
        dataset: DatasetManifest::toy_preset(2),
        model: ModelPreset::Logreg,
        config: LoopConfig {
            budget: Some(budget),
            queries_per_refit: 2,
            ..LoopConfig::toy(strategy, 5)
        },
    }
}

#[test]
fn replay_reproduces_metrics_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::start(spec(rrr(), 5), PathBuf::from(".")).unwrap();
    s.persist_to(dir.path()).unwrap();
    let truth = s.train_set().clone();
    run_xil(&mut s, &mut SimulatedOracle::new(&truth)).unwrap();
    let original = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(FeedbackLog::read(&dir.path().join("feedback.jsonl")).unwrap().len(), 5);

    let replayed = Session::replay(dir.path()).unwrap();
    assert_eq!(replayed.metrics(), s.metrics());
    let out = dir.path().join("replayed.csv");
    write_metrics_csv(&out, replayed.metrics()).unwrap();
    assert_eq!(std::fs::read(out).unwrap(), original);
    assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), s.metrics());
    assert_eq!(replayed.model(), s.model());
}

#[test]
fn resume_continues_where_it_stopped() {
    let full = {
        let mut s = Session::start(spec(ce(2), 5), PathBuf::from(".")).unwrap();
        let truth = s.train_set().clone();
        run_xil(&mut s, &mut SimulatedOracle::new(&truth)).unwrap();
        s.metrics().to_vec()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::start(spec(ce(2), 5), PathBuf::from(".")).unwrap();
    s.persist_to(dir.path()).unwrap();
    let truth = s.train_set().clone();
    let mut partial = Limited {
        inner: SimulatedOracle::new(&truth),
        left: 3,
    };
    assert_eq!(run_xil(&mut s, &mut partial).unwrap(), RunStatus::Paused);
    let waiting = s.pending().unwrap().instance_id;
    drop(s);

    let mut s = Session::resume(dir.path()).unwrap();
    assert_eq!(s.step(), 3);
    assert_eq!(s.pending().unwrap().instance_id, waiting);
    run_xil(&mut s, &mut SimulatedOracle::new(&truth)).unwrap();
    assert_eq!(s.metrics(), &full[..]);
    assert_eq!(FeedbackLog::read(&dir.path().join("feedback.jsonl")).unwrap().len(), 5);
    assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), full);
}

#[test]
fn replay_detects_a_foreign_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::start(spec(ce(1), 3), PathBuf::from(".")).unwrap();
    s.persist_to(dir.path()).unwrap();
    let q = s.next_query().unwrap();
    let mut log = FeedbackLog::open(&dir.path().join("feedback.jsonl")).unwrap();
    log.append(0, "ce-c1", &Correction::new(q.instance_id + 1000, 0, vec![])).unwrap();
    assert!(matches!(Session::replay(dir.path()), Err(LoopError::ReplayDesync { .. })));
}

#[test]
fn sessions_without_spec_cannot_persist() {
    let mut s = session(ce(1), 1);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(s.persist_to(dir.path()), Err(LoopError::NotPersistable)));
}

#[test]
fn config_round_trips_and_validates() {
    let c = LoopConfig::decoy(rrr(), 4);
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<LoopConfig>(&text).unwrap(), c);
    let bad = LoopConfig {
        queries_per_refit: 0,
        ..c.clone()
    };
    assert!(matches!(bad.validate(), Err(LoopError::InvalidConfig(_))));
    assert!(LoopConfig { strategy: ce(0), ..c }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // |U| shrinks by one per answer; |L| grows by 1 + c|C| under
    // counterexamples and by 1 under the penalty.
    #[test]
    fn labeled_and_pool_sizes_are_conserved(
        marks in prop::collection::vec(prop::collection::btree_set(0usize..9, 0..4), 1..5),
        count in 1usize..4,
        use_rrr in proptest::bool::ANY,
    ) {
        let strategy = if use_rrr { rrr() } else { ce(count) };
        let (train, test) = toy(30, 11);
        let config = LoopConfig {
            budget: Some(marks.len()),
            queries_per_refit: 100,
            ..LoopConfig::toy(strategy, 2)
        };
        let mut s = Session::from_datasets(train, test, &ModelPreset::Logreg, config).unwrap();
        for m in &marks {
            let (l, u) = (s.labeled_len(), s.pool_ids().len());
            let q = s.next_query().unwrap();
            s.submit(&Correction::new(q.instance_id, q.prediction, m.iter().copied().collect())).unwrap();
            assert_eq!(s.pool_ids().len(), u - 1);
            let grow = if use_rrr { 1 } else { 1 + count * m.len() };
            assert_eq!(s.labeled_len(), l + grow);
            assert_eq!(s.labeled_set().masks.is_some(), use_rrr);
        }
        assert_eq!(s.metrics().len(), 2);
    }
}

#[test]
fn gradient_explainers_run_in_the_loop() {
    let (train, test) = toy(40, 5);
    let config = LoopConfig {
        explainer: ExplainerConfig::InputGradient { k: 2 },
        ..LoopConfig::toy(rrr(), 1)
    };
    let mut s = Session::from_datasets(train.clone(), test.clone(), &ModelPreset::Logreg, config).unwrap();
    let q = s.next_query().unwrap();
    assert_eq!(q.explanation.kind, ExplanationKind::InputGradient);
    assert!(q.explanation.top_k.len() <= 2);

    let cnn = ModelPreset::Cnn {
        conv_channels: vec![2],
        kernel: 3,
        pool: 1,
        dense: vec![],
    };
    let config = LoopConfig {
        explainer: ExplainerConfig::Gradcam { k: 2 },
        strategy: Strategy::Rrr {
            lambda1: Lambda1::Fixed(1.0),
            lambda2: 0.0,
            target: RrrTarget::LastConv,
        },
        ..LoopConfig::toy(Strategy::None, 1)
    };
    let mut s = Session::from_datasets(train.clone(), test, &cnn, config).unwrap();
    run_xil(&mut s, &mut SimulatedOracle::new(&train)).unwrap();
    assert_eq!(s.labeled_set().masks.unwrap().shape(), &[25, 3, 3]);
}
