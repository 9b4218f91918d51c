use dgm_core::eval::{evaluate_checkpoint, EvalMode};
use dgm_core::odegen::{generate_dataset, Preset};
use dgm_core::smoother::{derivative_posterior, state_posterior, PointSet};
use dgm_core::trainer::{train, Checkpoint, Phase, PhaseSteps, TrainConfig};

fn short_config(transition: usize, finetune: usize) -> TrainConfig {
    TrainConfig {
        phases: PhaseSteps::new(transition, 0, finetune),
        ..TrainConfig::default()
    }
}

#[test]
fn sequential_smoothing_makes_steady_progress() {
    let data = generate_dataset(Preset::Lv1, 0).unwrap();
    let config = TrainConfig {
        lambda_final: Some(0.0),
        ..short_config(50, 1)
    };
    let (ckpt, history) = train(&data, &config).unwrap();
    let data_terms: Vec<f64> = history.steps.iter().map(|s| s.loss.data_term).collect();
    assert!(history.steps.iter().all(|s| s.loss.wasserstein_term == 0.0));
    let first = data_terms[0];
    let best = data_terms.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < first - 1.0, "data term {first} -> best {best}");
    assert!(*data_terms.last().unwrap() < first);
    assert_eq!(ckpt.final_metrics.wasserstein_term, 0.0);
}

#[test]
fn derivative_mean_matches_time_derivative_of_trained_state_mean() {
    let data = generate_dataset(Preset::Lv1, 1).unwrap();
    let (ckpt, _) = train(&data, &short_config(40, 10)).unwrap();
    let params = ckpt.param_vector();
    let problem = ckpt.problem();
    let x0 = data.trajectories[0].x0.clone();
    let h = 1e-4;
    let mut worst = 0.0_f64;
    for &t in &[0.7, 2.3, 4.1, 6.6, 9.2] {
        let mut at = PointSet::default();
        at.push(&x0, t, Some(0));
        let mut around = PointSet::default();
        around.push(&x0, t + h, Some(0));
        around.push(&x0, t - h, Some(0));
        let mu = derivative_posterior(&params, &problem, &at, &ckpt.hyper.smoother).unwrap().mean;
        let s = state_posterior(&params, &problem, &around, &ckpt.hyper.smoother).unwrap().mean;
        for d in 0..2 {
            let fd = (s[(0, d)] - s[(1, d)]) / (2.0 * h);
            worst = worst.max((mu[(0, d)] - fd).abs() / fd.abs().max(1.0));
        }
    }
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = generate_dataset(Preset::Lv1, 2).unwrap();
    let config = short_config(15, 5);
    let (a, ha) = train(&data, &config).unwrap();
    let (b, _) = train(&data, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ha.steps.len(), 20);
    assert_eq!(ha.steps[14].phase, Phase::Transition);
    assert_eq!(ha.steps[15].phase, Phase::Finetune);
    assert_eq!(ha.steps[15].lr, config.lr_finetune);

    let back = Checkpoint::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let r1 = evaluate_checkpoint(&a, EvalMode::Train, 0).unwrap();
    let r2 = evaluate_checkpoint(&back, EvalMode::Train, 0).unwrap();
    assert_eq!(r1.mean_ll, r2.mean_ll);
    assert!(r1.mean_ll.is_finite());
}

#[test]
fn generalization_needs_a_preset() {
    let data = generate_dataset(Preset::Lv1, 3).unwrap();
    let (mut ckpt, _) = train(&data, &short_config(2, 1)).unwrap();
    assert!(evaluate_checkpoint(&ckpt, EvalMode::Generalization, 0).is_ok());
    ckpt.spec.preset = None;
    assert!(evaluate_checkpoint(&ckpt, EvalMode::Generalization, 0).is_err());
    assert!(evaluate_checkpoint(&ckpt, EvalMode::Train, 0).is_ok());
}
