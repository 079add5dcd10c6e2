//! Library-level pipeline checks: data sanity, pretraining quality, training
//! dynamics and persistence.

use dna_core::checkpoint::TensorDump;
use dna_core::config::TrainConfig;
use dna_core::eval::{cluster_and_score, NeighborAuditor};
use dna_core::membank::FeatureBank;
use dna_core::synthdata::{format_dataset, generate, parse_dataset, HierarchySpec, Split};
use dna_core::trainer::{pretrain, pretrain_dump, run_pretrained, EvalSplit, RunData};
use proptest::prelude::*;

fn small_spec(seed: u64) -> HierarchySpec {
    HierarchySpec {
        num_coarse: 4,
        fines_per_coarse: 3,
        samples_per_fine: 20,
        input_dim: 12,
        seed,
        ..HierarchySpec::default()
    }
}

#[test]
fn raw_inputs_are_separable_beyond_chance() {
    for seed in 0..3 {
        let spec = HierarchySpec {
            noise_sigma: HierarchySpec::default().fine_spread / 4.0,
            seed,
            ..HierarchySpec::default()
        };
        let ds = generate(&spec).unwrap();
        let truth = ds.fine_labels(Split::Train).unwrap();
        let s =
            cluster_and_score(&ds.inputs(Split::Train), &truth, spec.num_fine(), seed, 5).unwrap();
        let chance = 1.0 / spec.num_fine() as f64;
        assert!(
            s.acc > 2.0 * chance,
            "seed {seed}: acc {} vs chance {chance}",
            s.acc
        );
    }
}

#[test]
fn pretraining_learns_coarse_labels() {
    let ds = generate(&HierarchySpec::default()).unwrap();
    let pre = pretrain(&ds.train_view(), &TrainConfig::default()).unwrap();
    assert!(
        pre.coarse_train_acc > 0.95,
        "coarse train acc {}",
        pre.coarse_train_acc
    );
    let first = pre.history.first().unwrap().ce;
    let last = pre.history.last().unwrap().ce;
    assert!(last < first);
}

#[test]
fn training_loss_decreases_early_and_neighbors_improve() {
    let ds = generate(&HierarchySpec::default()).unwrap();
    let train = ds.train_view();
    let eval =
        EvalSplit::new(ds.inputs(Split::Test), ds.fine_labels(Split::Test).unwrap()).unwrap();
    let auditor = NeighborAuditor::new(ds.fine_labels(Split::Train).unwrap());
    let data = RunData {
        train: &train,
        eval: Some(&eval),
        auditor: Some(&auditor),
    };
    let cfg = TrainConfig::default();
    for seed in 0..3 {
        let cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let pre = pretrain(&train, &cfg).unwrap();
        let out = run_pretrained(&cfg, data, &pre, &mut ()).unwrap();
        let h = &out.state.history;
        assert_eq!(h.len(), cfg.train_epochs);
        // the rank filter only runs on epoch 0, so compare from epoch 1 on
        let losses: Vec<f64> = h.iter().map(|m| m.loss.total).collect();
        assert!(losses[5] < losses[1], "seed {seed}: losses {losses:?}");

        let nacc: Vec<f64> = h
            .iter()
            .map(|m| m.selected().unwrap().fine_accuracy.unwrap())
            .collect();
        let acc: Vec<f64> = h.iter().map(|m| m.eval.unwrap().acc).collect();
        let rho = spearman(&nacc, &acc);
        assert!(
            rho > 0.0,
            "seed {seed}: neighbor/test accuracy rank correlation {rho}"
        );
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn checkpoints_restore_training_state() {
    let ds = generate(&small_spec(3)).unwrap();
    let train = ds.train_view();
    let cfg = TrainConfig {
        k: 20,
        pretrain_epochs: 5,
        train_epochs: 3,
        ..TrainConfig::default()
    };
    let pre = pretrain(&train, &cfg).unwrap();
    let pd = TensorDump::parse(&pretrain_dump(&pre, &cfg).to_text()).unwrap();
    assert_eq!(pd.read_params("query").unwrap(), pre.params);
    assert_eq!(pd.meta("kind"), Some("pretrain"));

    let data = RunData {
        train: &train,
        eval: None,
        auditor: None,
    };
    let out = run_pretrained(&cfg, data, &pre, &mut ()).unwrap();
    let dump = out.state.to_dump(&cfg);
    let back = TensorDump::parse(&dump.to_text()).unwrap();
    assert_eq!(back, dump);
    assert_eq!(back.fingerprint(), dump.fingerprint());
    assert_eq!(back.read_params("momentum").unwrap(), out.state.params_m);
    let bank = FeatureBank::from_dump(&back).unwrap();
    assert_eq!(bank.keys(), out.state.bank.keys());
    assert_eq!(back.meta("k"), Some("20"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_text_round_trip(
        seed in 0u64..1000,
        num_coarse in 2usize..4,
        fines in 1usize..4,
        per_fine in 4usize..8,
        dim in 1usize..6,
        noise in 0.0f64..2.0,
        imbalance in 0.0f64..0.5,
    ) {
        let spec = HierarchySpec {
            num_coarse,
            fines_per_coarse: fines,
            samples_per_fine: per_fine,
            input_dim: dim,
            noise_sigma: noise,
            imbalance,
            seed,
            ..HierarchySpec::default()
        };
        prop_assume!(spec.validate().is_ok());
        let ds = generate(&spec).unwrap();
        let text = format_dataset(&ds);
        let back = parse_dataset(&text).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(format_dataset(&back), text);
    }
}
