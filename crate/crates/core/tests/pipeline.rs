use raf_core::config::ExperimentConfig;
use raf_core::experiments::{self, Variant};
use raf_core::metrics::evaluate;
use raf_core::{Interp, Resolution};

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(
        "experiment = \"compare\"\nseed = 2\n[data]\nsamples_per_client = 32\neval_samples = 16\n\
         [train]\nrounds = 12\nrepeats = 1\n"
    )
    .unwrap()
}

#[test]
fn federated_training_lowers_task_loss() {
    let cfg = small();
    let data = experiments::repeat_data(&cfg, 0, 3);
    for variant in [Variant::BaseFedavg, Variant::RafFedprox] {
        let out = experiments::train(&cfg, &cfg.clients.resolutions, &data, variant, 1).unwrap();
        let task = |r: usize| out.logs[r].clients.iter().map(|c| c.loss.task).sum::<f64>();
        assert!(task(11) < 0.8 * task(0), "{variant:?}: {} -> {}", task(0), task(11));
        assert!(out.params.all_finite());
    }
}

#[test]
fn distillation_is_logged_only_for_multi_level_clients() {
    let cfg = small();
    let data = experiments::repeat_data(&cfg, 0, 3);
    let out = experiments::train(&cfg, &cfg.clients.resolutions, &data, Variant::RafFedavg, 1).unwrap();
    for log in &out.logs {
        for c in &log.clients {
            let levels = experiments::raf_levels(cfg.clients.resolutions[c.client_id], &cfg.clients.family).len();
            assert_eq!(c.loss.kd == 0.0, levels == 1, "client {}", c.client_id);
            assert_eq!(c.loss.prox, 0.0);
        }
    }
}

#[test]
fn ground_truth_heatmaps_score_perfectly() {
    // Decoding the rendered targets recovers every keypoint within tau.
    let cfg = small();
    let data = experiments::repeat_data(&cfg, 0, 1);
    for res in [Resolution::new(32, 24), Resolution::new(64, 48), Resolution::new(128, 96)] {
        let set = experiments::render_all(&data.eval, res, &cfg).unwrap();
        for s in &set {
            let cells = raf_core::metrics::decode(&s.target).unwrap();
            let pred: Vec<(f64, f64)> = cells
                .iter()
                .map(|&c| raf_core::metrics::grid_to_native(c, cfg.model.patch, res, res))
                .collect();
            assert_eq!(raf_core::metrics::pck(&pred, &s.keypoints, cfg.eval.tau, res).unwrap(), 1.0);
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let cfg = small();
    let data = experiments::repeat_data(&cfg, 0, 3);
    let out = experiments::train(&cfg, &cfg.clients.resolutions, &data, Variant::RafFedavg, 2).unwrap();
    let set = experiments::render_all(&data.eval, Resolution::new(32, 24), &cfg).unwrap();
    let steps = [(Resolution::new(64, 48), Interp::Bilinear)];
    let a = evaluate(&out.params, &cfg.model, &set, &steps, cfg.eval.tau).unwrap();
    let b = evaluate(&out.params, &cfg.model, &set, &steps, cfg.eval.tau).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.pck));
    assert_eq!(a.n_samples, set.len());
}

#[test]
fn compare_table_has_one_column_per_variant() {
    let mut cfg = small();
    cfg.train.rounds = 2;
    cfg.eval.resolutions = vec![Resolution::new(32, 24), Resolution::new(96, 72)];
    let c = experiments::compare(&cfg, 1).unwrap();
    assert_eq!(c.pck.len(), 4);
    assert!(c.pck.iter().all(|col| col.len() == 2));
    let mut buf = Vec::new();
    experiments::write_compare_csv(&mut buf, "# h", &c).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "inference_res,base_fedavg,base_fedprox,raf_fedavg,raf_fedprox");
    assert_eq!(text.lines().count(), 4);
}
