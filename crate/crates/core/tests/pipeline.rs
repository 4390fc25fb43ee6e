//! End-to-end behavior of the train -> prune -> fine-tune pipeline on the
//! synthetic task.

use connect_core::connectivity::{normalize, phi_total, Mode};
use connect_core::data::default_toy;
use connect_core::network::{LayeredNetwork, PruneMask};
use connect_core::pruning::{build_mask, score_magnitude, Granularity, PruneSpec};
use connect_core::training::{evaluate, fine_tune, train, RegularizerConfig, TrainConfig};

const SIZES: [usize; 5] = [6, 5, 5, 5, 1];

fn study_config(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(epochs, 256, lr, seed);
    cfg.connect_warmup_epochs = if lr > 0.005 { 100 } else { 0 };
    cfg
}

#[test]
fn unregularized_run_solves_the_task() {
    let data = default_toy(42);
    let net = LayeredNetwork::init_random(&SIZES, 7).unwrap();
    let reg = RegularizerConfig {
        l1: 0.0,
        connect: 0.0,
        l2: 5e-4,
    };
    let (_, metrics) = train(&net, &data, &reg, &study_config(200, 0.01, 7)).unwrap();
    assert!(
        metrics.final_test_acc > 0.95,
        "final accuracy {}",
        metrics.final_test_acc
    );
}

#[test]
fn barrier_run_concentrates_on_informative_inputs() {
    let data = default_toy(42);
    let net = LayeredNetwork::init_random(&SIZES, 3).unwrap();
    let reg = RegularizerConfig {
        l1: 0.0,
        connect: 0.1,
        l2: 5e-4,
    };
    let (trained, metrics) = train(&net, &data, &reg, &study_config(200, 0.01, 3)).unwrap();
    // connectivity grows over training
    let first = metrics.epochs.first().unwrap().phi_tot;
    let last = metrics.epochs.last().unwrap().phi_tot;
    assert!(last > first, "phi went {first} -> {last}");
    assert!(last > 0.9, "phi ended at {last}");
    // connectivity mass concentrates on the two informative inputs: their
    // input-to-output connectivity carries nearly all of phi
    let view = normalize(&trained, Mode::Normalized);
    let profile = connect_core::connectivity::node_connectivity(&view);
    let a_out = profile.a_out_layer(0);
    let informative = a_out[0] + a_out[1];
    let total: f64 = a_out.iter().sum();
    assert!(
        informative / total > 0.9,
        "informative connectivity share {}",
        informative / total
    );
}

#[test]
fn finetune_recovers_accuracy_after_heavy_pruning() {
    let data = default_toy(42);
    let net = LayeredNetwork::init_random(&SIZES, 5).unwrap();
    let reg = RegularizerConfig {
        l1: 0.0,
        connect: 0.1,
        l2: 5e-4,
    };
    let (trained, _) = train(&net, &data, &reg, &study_config(200, 0.01, 5)).unwrap();
    let mask = build_mask(
        &trained,
        &score_magnitude(&trained),
        &PruneSpec::local(0.96, Granularity::Weight),
    )
    .unwrap();
    let pruned = trained.apply_mask(&mask).unwrap();
    let (tuned, _) = fine_tune(
        &pruned,
        &data,
        &reg.for_finetune(),
        &study_config(50, 0.001, 5),
    )
    .unwrap();
    // masked entries stayed pinned through all 50 epochs
    let final_mask = tuned.mask().unwrap();
    for (w, keep) in tuned.weights().iter().zip(&final_mask.weights) {
        for (x, &k) in w.data().iter().zip(keep) {
            if !k {
                assert_eq!(*x, 0.0);
            }
        }
    }
    let (_, acc) = evaluate(&tuned, &data.test_x, &data.test_y).unwrap();
    assert!(acc >= 0.95, "recovered accuracy {acc}");
    assert!(phi_total(&normalize(&tuned, Mode::Normalized)) > 0.0);
}

#[test]
fn single_seed_unpruned_plan_lands_in_the_full_cluster() {
    use connect_core::experiment::{
        run_experiment, Cluster, ExperimentPlan, PlanEntry, PruneMethod,
    };
    let mut plan = ExperimentPlan::default_plan(1);
    plan.seeds = vec![0];
    plan.runs = vec![PlanEntry {
        preset: "connect".into(),
        method: PruneMethod::Magnitude,
        fraction: 0.0,
    }];
    let report = run_experiment(&plan, None).unwrap();
    let group = report.group("connect", PruneMethod::Magnitude).unwrap();
    assert_eq!(group.counts.full, 1, "unpruned accurate model: {group:?}");
    assert_eq!(group.runs[0].cluster, Some(Cluster::Full));
}

#[test]
fn collapsed_network_stays_at_chance() {
    let data = default_toy(42);
    let net = LayeredNetwork::init_random(&SIZES, 11).unwrap();
    let reg = RegularizerConfig::none();
    let (trained, _) = train(&net, &data, &reg, &study_config(30, 0.01, 11)).unwrap();
    // sever an entire hidden layer by hand
    let mut mask = PruneMask::all_ones(&trained);
    for k in mask.weights[1].iter_mut() {
        *k = false;
    }
    let collapsed = trained.apply_mask(&mask).unwrap();
    assert_eq!(phi_total(&normalize(&collapsed, Mode::Normalized)), 0.0);
    let (tuned, _) = fine_tune(
        &collapsed,
        &data,
        &reg.for_finetune(),
        &study_config(50, 0.001, 11),
    )
    .unwrap();
    let (_, acc) = evaluate(&tuned, &data.test_x, &data.test_y).unwrap();
    assert!(
        (acc - 0.5).abs() < 0.06,
        "collapsed net scored {acc}, expected chance level"
    );
}
