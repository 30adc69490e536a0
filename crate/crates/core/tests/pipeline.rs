use msda_core::datagen::{generate_benchmark, BenchmarkSpec, Role, SubjectDataset};
use msda_core::model::ModelBundle;
use msda_core::pipeline::{
    ablate, adapt_stage, embedding_header, evaluate, export_embeddings, fresh_identity_probe, fused_accuracy,
    read_embeddings, run_baseline, run_method, train_source_stage, write_metrics_csv, write_results_csv,
    AblationGrid, AblationKind, AdaptInput, AdaptMode, BaselineKind, LossWeights, ResultRow, SourceData, TargetData,
    TrainConfig, EMBEDDING_FIXED_COLUMNS,
};
use msda_core::rng::stream;

fn small_spec(seed: u64) -> BenchmarkSpec {
    BenchmarkSpec {
        samples_per_subject: 80,
        dim_visual: 8,
        dim_physio: 6,
        seed,
        ..BenchmarkSpec::default()
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        hidden: 32,
        embed: 8,
        head_hidden: 16,
        source_epochs: 8,
        epochs: 3,
        ..TrainConfig::default()
    }
}

struct World {
    subjects: Vec<SubjectDataset>,
    sources: SourceData,
    bundle: ModelBundle,
}

impl World {
    fn new(spec: &BenchmarkSpec, cfg: &TrainConfig, seed: u64) -> Self {
        let subjects = generate_benchmark(spec).unwrap();
        let refs: Vec<&SubjectDataset> = subjects.iter().filter(|s| s.role == Role::Source).collect();
        let sources = SourceData::split(&refs, cfg.source_holdout, seed).unwrap();
        let (bundle, _) = train_source_stage(&sources, spec.n_classes, cfg, seed).unwrap();
        Self {
            subjects,
            sources,
            bundle,
        }
    }

    fn target(&self, k: usize, seed: u64) -> TargetData {
        let t = self.subjects.iter().filter(|s| s.role == Role::Target).nth(k).unwrap();
        TargetData::split(t, seed).unwrap()
    }
}

#[test]
fn no_shift_sources_are_learned_within_twenty_epochs() {
    let spec = BenchmarkSpec {
        shift_strength: 0.0,
        identity_leak: 0.0,
        group_spread: 0.0,
        group_offset: 0.0,
        n_distractors: 0,
        seed: 0,
        ..BenchmarkSpec::default()
    };
    let cfg = TrainConfig {
        source_epochs: 20,
        ..TrainConfig::default()
    };
    let subjects = generate_benchmark(&spec).unwrap();
    let refs: Vec<&SubjectDataset> = subjects.iter().filter(|s| s.role == Role::Source).collect();
    let sources = SourceData::split(&refs, cfg.source_holdout, 0).unwrap();
    let (bundle, report) = train_source_stage(&sources, 4, &cfg, 0).unwrap();
    assert_eq!(report.epochs.len(), 20);
    let acc = report.epochs.last().unwrap().train_acc;
    assert!(acc >= 0.95, "train accuracy {acc}");
    for t in subjects.iter().filter(|s| s.role == Role::Target) {
        let acc = fused_accuracy(&bundle, t).unwrap();
        assert!(acc >= 0.95, "{}: {acc}", t.subject_id);
    }
}

#[test]
fn source_loss_decreases_on_identity_leaky_data() {
    for seed in 0..3 {
        let spec = BenchmarkSpec {
            identity_leak: 2.0,
            ..small_spec(seed)
        };
        let subjects = generate_benchmark(&spec).unwrap();
        let refs: Vec<&SubjectDataset> = subjects.iter().filter(|s| s.role == Role::Source).collect();
        let sources = SourceData::split(&refs, 0.2, seed).unwrap();
        let (_, report) = train_source_stage(&sources, 4, &quick_cfg(), seed).unwrap();
        let (first, last) = (&report.epochs[0], report.epochs.last().unwrap());
        assert!(last.loss_fusion < first.loss_fusion, "seed {seed}");
        assert!(last.loss_v + last.loss_p < first.loss_v + first.loss_p, "seed {seed}");
    }
}

#[test]
fn source_stage_is_deterministic() {
    let cfg = quick_cfg();
    let subjects = generate_benchmark(&small_spec(4)).unwrap();
    let refs: Vec<&SubjectDataset> = subjects.iter().filter(|s| s.role == Role::Source).collect();
    let sources = SourceData::split(&refs, 0.2, 4).unwrap();
    let (a, ra) = train_source_stage(&sources, 4, &cfg, 4).unwrap();
    let (b, rb) = train_source_stage(&sources, 4, &cfg, 4).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
    assert_eq!(ra, rb);
    let (c, _) = train_source_stage(&sources, 4, &cfg, 5).unwrap();
    assert_ne!(a.param_hash(), c.param_hash());
}

#[test]
fn zero_disentangle_weight_ignores_every_estimator_setting() {
    let subjects = generate_benchmark(&small_spec(1)).unwrap();
    let refs: Vec<&SubjectDataset> = subjects.iter().filter(|s| s.role == Role::Source).collect();
    let sources = SourceData::split(&refs, 0.2, 1).unwrap();
    let mut plain = quick_cfg();
    plain.weights.disentangle = 0.0;
    plain.estimator.mi_variant = false;
    let mut other = plain.clone();
    other.estimator.mi_variant = true;
    other.identity_aux_loss = true;
    let (a, ra) = train_source_stage(&sources, 4, &plain, 1).unwrap();
    let (_, rb) = train_source_stage(&sources, 4, &other, 1).unwrap();
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(x.loss_fusion.to_bits(), y.loss_fusion.to_bits());
        assert_eq!(x.loss_v.to_bits(), y.loss_v.to_bits());
        assert_eq!((x.loss_d_v, x.loss_d_p), (0.0, 0.0));
    }
    let mut with_ld = plain.clone();
    with_ld.weights.disentangle = 0.05;
    let (c, rc) = train_source_stage(&sources, 4, &with_ld, 1).unwrap();
    assert_ne!(a.param_hash(), c.param_hash());
    assert!(rc.epochs.iter().all(|e| e.loss_d_v != 0.0));
}

#[test]
fn empty_sources_are_rejected() {
    let sources = SourceData::split(&[], 0.2, 0);
    let err = sources.and_then(|s| train_source_stage(&s, 4, &quick_cfg(), 0).map(|_| ()));
    assert!(err.is_err());
}

#[test]
fn accuracy_of_untrained_models_is_near_chance_and_order_free() {
    let subjects = generate_benchmark(&small_spec(2)).unwrap();
    let t = subjects.iter().find(|s| s.role == Role::Target).unwrap();
    let cfg = quick_cfg();
    let dims = cfg.dims(8, 6, 4, 12);
    let mut mean = 0.0;
    for k in 0..20 {
        let b = ModelBundle::new(dims, cfg.estimator, &mut stream(k, "untrained")).unwrap();
        let acc = fused_accuracy(&b, t).unwrap();
        let mut order: Vec<usize> = (0..t.len()).rev().collect();
        order.rotate_left(7);
        assert_eq!(fused_accuracy(&b, &t.subset(&order)).unwrap(), acc);
        mean += acc / 20.0;
    }
    assert!((mean - 0.25).abs() <= 0.08, "mean accuracy {mean}");
}

#[test]
fn sealed_test_is_opened_only_by_evaluation() {
    let cfg = quick_cfg();
    let w = World::new(&small_spec(3), &cfg, 3);
    let target = w.target(0, 3);
    let run = run_method(&w.bundle, &w.sources, &target, &cfg, 3, false).unwrap();
    assert_eq!(target.test().access_log(), vec!["evaluate".to_string()]);
    assert!(run.metrics.epochs.iter().all(|e| e.test_acc.is_none()));
    assert_eq!(evaluate(&run.bundle, target.test()).unwrap(), run.test_acc);

    let tracked = w.target(0, 3);
    let run = run_method(&w.bundle, &w.sources, &tracked, &cfg, 3, true).unwrap();
    assert_eq!(tracked.test().access_log().len(), cfg.epochs);
    assert_eq!(run.metrics.test_acc, Some(run.test_acc));
}

#[test]
fn adaptation_records_every_epoch_and_repeats_exactly() {
    let cfg = quick_cfg();
    let w = World::new(&small_spec(5), &cfg, 5);
    let target = w.target(1, 5);
    let a = run_method(&w.bundle, &w.sources, &target, &cfg, 5, false).unwrap();
    let b = run_method(&w.bundle, &w.sources, &target, &cfg, 5, false).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.bundle.param_hash(), b.bundle.param_hash());
    assert_eq!(a.metrics.epochs.len(), cfg.epochs);
    for e in &a.metrics.epochs {
        assert!(e.n_confident <= target.train.len());
        assert!(e.loss_s.is_finite() && e.loss_s > 0.0);
        assert!(e.id_probe_v.is_some() && e.id_probe_p.is_some());
    }
    assert!(!a.selected.is_empty());
}

#[test]
fn zero_adaptation_weights_make_training_target_independent() {
    let mut cfg = quick_cfg();
    cfg.weights = cfg.weights.source_only();
    let w = World::new(&small_spec(6), &cfg, 6);
    let sources = w.sources.train_refs();
    let (t0, t1) = (w.target(0, 6), w.target(1, 6));
    assert_eq!(t0.train.len(), t1.train.len());
    let run = |t: &TargetData| {
        let input = AdaptInput {
            sources: &sources,
            target: t,
            identity: None,
            track_test: false,
            observer: None,
        };
        adapt_stage(&w.bundle, &input, AdaptMode::Full, &cfg, 6).unwrap()
    };
    let ((a, ma), (b, mb)) = (run(&t0), run(&t1));
    assert_eq!(a.param_hash(), b.param_hash());
    let losses = |m: &msda_core::pipeline::RunMetrics| m.epochs.iter().map(|e| e.loss_s).collect::<Vec<_>>();
    assert_eq!(losses(&ma), losses(&mb));
    assert!(ma.epochs.iter().all(|e| e.loss_unsup == 0.0 && e.loss_agn == 0.0 && e.loss_aw == 0.0));
}

#[test]
fn zero_adaptation_weights_stay_near_the_lower_bound() {
    let mut gap = 0.0;
    let mut n = 0.0;
    for seed in 0..3 {
        let mut cfg = TrainConfig {
            source_epochs: 20,
            ..quick_cfg()
        };
        cfg.weights = cfg.weights.source_only();
        let w = World::new(&small_spec(seed), &cfg, seed);
        for k in 0..3 {
            let target = w.target(k, seed);
            let lower = evaluate(&w.bundle, target.test()).unwrap();
            let run = run_method(&w.bundle, &w.sources, &target, &cfg, seed, false).unwrap();
            gap += run.test_acc - lower;
            n += 1.0;
        }
    }
    let gap = gap / n;
    assert!(gap.abs() <= 0.02, "mean gap {gap}");
}

#[test]
fn baselines_report_a_test_accuracy() {
    let cfg = quick_cfg();
    let w = World::new(&small_spec(7), &cfg, 7);
    let target = w.target(2, 7);
    for kind in BaselineKind::ALL {
        let m = run_baseline(kind, &w.bundle, &w.sources, &target, &cfg, 7).unwrap();
        let acc = m.test_acc.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let trains = matches!(kind, BaselineKind::BlendMmdUda | BaselineKind::UpperFinetune);
        assert_eq!(m.epochs.len(), if trains { cfg.epochs } else { 0 }, "{kind}");
    }
    let lower = run_baseline(BaselineKind::LowerFusion, &w.bundle, &w.sources, &target, &cfg, 7).unwrap();
    assert_eq!(lower.test_acc.unwrap(), evaluate(&w.bundle, target.test()).unwrap());
}

#[test]
fn ablation_rows_follow_the_grid() {
    let cfg = TrainConfig {
        epochs: 1,
        ..quick_cfg()
    };
    let w = World::new(&small_spec(8), &cfg, 8);
    let targets = vec![w.target(0, 8), w.target(1, 8)];
    let grid = AblationGrid::Thresholds(vec![0.0, 0.5, 0.5, 1.0]);
    let table = ablate(AblationKind::TauSsSweep, &grid, &w.bundle, &w.sources, &targets, &cfg, 8).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows[1], table.rows[2]);
    let counts: Vec<Vec<usize>> = table.rows.iter().map(|r| r.selected.clone().unwrap()).collect();
    assert_eq!(counts[0], vec![12, 12]);
    for pair in counts.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            assert!(b <= a);
        }
    }
    assert!(counts[3].iter().all(|&c| (1..=2).contains(&c)));

    let comp = ablate(
        AblationKind::LossComponents,
        &AblationGrid::Components,
        &w.bundle,
        &w.sources,
        &targets[..1],
        &cfg,
        8,
    )
    .unwrap();
    let names: Vec<&str> = comp.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(names, ["ls", "ls+lt", "ls+lt+lagn", "ls+lt+lagn+law"]);
    assert!(comp.rows.iter().all(|r| r.selected.is_none()));

    let bad = ablate(AblationKind::LossWeights, &grid, &w.bundle, &w.sources, &targets, &cfg, 8);
    assert!(bad.is_err());
}

#[test]
fn default_grids_match_their_kind() {
    for kind in AblationKind::ALL {
        let ok = matches!(
            (kind, AblationGrid::default_for(kind)),
            (AblationKind::TauSsSweep | AblationKind::TauPlSweep, AblationGrid::Thresholds(_))
                | (AblationKind::LossWeights, AblationGrid::Weights(_))
                | (AblationKind::LossComponents, AblationGrid::Components)
        );
        assert!(ok, "{kind}");
    }
    let AblationGrid::Weights(w) = AblationGrid::default_for(AblationKind::LossWeights) else {
        unreachable!()
    };
    let d = LossWeights::default();
    assert!(w.contains(&[d.unsup, d.agn, d.aw]));
}

#[test]
fn embeddings_round_trip_through_csv() {
    let cfg = quick_cfg();
    let w = World::new(&small_spec(9), &cfg, 9);
    let target = w.target(0, 9);
    let mut subjects: Vec<&SubjectDataset> = w.subjects.iter().filter(|s| s.role == Role::Source).take(2).collect();
    subjects.push(&target.train);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    export_embeddings(&w.bundle, &subjects, 0.5, &path).unwrap();
    let (header, rows) = read_embeddings(&path).unwrap();
    assert_eq!(header, embedding_header(&w.bundle));
    assert_eq!(&header[..4], EMBEDDING_FIXED_COLUMNS.as_slice());
    let width = cfg.embed * 2 + cfg.head_hidden;
    assert_eq!(header.len(), 4 + width);
    assert_eq!(rows.len(), subjects.iter().map(|s| s.len()).sum::<usize>());
    for r in &rows {
        assert_eq!(r.values.len(), width);
        match r.role.as_str() {
            "source" => assert!(r.pseudo_label.is_none()),
            "target" => assert_eq!(r.subject_id, target.id),
            other => panic!("role {other}"),
        }
    }
    let first = w.bundle.embed_values(msda_core::nets::Modality::Visual, &subjects[0].visual).unwrap();
    for (j, v) in first.row(0).iter().enumerate() {
        assert_eq!(rows[0].values[j].to_bits(), v.to_bits());
    }
    assert_eq!(rows[0].label, subjects[0].labels[0]);
}

#[test]
fn metrics_and_results_csv_layout() {
    let cfg = quick_cfg();
    let w = World::new(&small_spec(10), &cfg, 10);
    let target = w.target(0, 10);
    let run = run_method(&w.bundle, &w.sources, &target, &cfg, 10, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&run.metrics, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,loss_s,loss_unsup,loss_agn,loss_aw,n_confident,val_acc,test_acc,id_probe_v,id_probe_p"
    );
    assert_eq!(lines.len(), cfg.epochs + 1);
    for (k, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 10);
        assert_eq!(f[0], k.to_string());
        assert_eq!(f[7], "");
    }

    let rows = vec![
        ResultRow {
            method: "a".into(),
            target: "t00".into(),
            accuracy: 0.5,
        },
        ResultRow {
            method: "a".into(),
            target: "t01".into(),
            accuracy: 1.0,
        },
        ResultRow {
            method: "b".into(),
            target: "t00".into(),
            accuracy: 0.25,
        },
    ];
    let path = dir.path().join("r.csv");
    write_results_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,t00,t01,avg");
    assert_eq!(lines[1], "a,0.5,1,0.75");
    assert!(lines[2].starts_with("b,0.25,"));
}

#[test]
fn fresh_probe_reads_identity_from_leaky_embeddings() {
    let spec = BenchmarkSpec {
        identity_leak: 4.0,
        noise: 0.0,
        ..small_spec(11)
    };
    let mut cfg = quick_cfg();
    cfg.weights.disentangle = 0.0;
    let w = World::new(&spec, &cfg, 11);
    let (v, p) = fresh_identity_probe(&w.bundle, &w.sources, &cfg.probe, 11).unwrap();
    assert!(v >= 0.9 && p >= 0.9, "probe {v} {p}");
}
