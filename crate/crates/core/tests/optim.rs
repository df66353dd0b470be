use duostream_core::optim::{lr_at, zero_grads, AdamW, ScheduleConfig};
use duostream_core::{Error, Model, ModelConfig, NormMode, ParamRole, ParamStore, Tensor};

fn store_with(values: &[f64], grad: Option<&[f64]>, role: ParamRole) -> ParamStore {
    let mut s = ParamStore::new();
    let mut t = Tensor::new([values.len()], values.to_vec()).unwrap();
    t.grad = grad.map(|g| g.to_vec());
    s.insert("p", t, role).unwrap();
    s
}

/// Textbook AdamW on one scalar, written out longhand.
struct ScalarAdamW {
    theta: f64,
    m: f64,
    v: f64,
    b1_pow: f64,
    b2_pow: f64,
}

impl ScalarAdamW {
    fn new(theta: f64) -> Self {
        Self { theta, m: 0.0, v: 0.0, b1_pow: 1.0, b2_pow: 1.0 }
    }

    fn step(&mut self, g: f64, lr: f64, wd: f64) {
        self.theta -= lr * wd * self.theta;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        self.b1_pow *= 0.9;
        self.b2_pow *= 0.999;
        let m_hat = self.m / (1.0 - self.b1_pow);
        let v_hat = self.v / (1.0 - self.b2_pow);
        self.theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
    }
}

#[test]
fn schedule_anchor_values_are_exact() {
    let c = ScheduleConfig::default();
    assert_eq!(lr_at(0.0, &c).unwrap(), 2e-8);
    assert_eq!(lr_at(5.0, &c).unwrap(), 1e-3);
    assert_eq!(lr_at(2000.0, &c).unwrap(), 2e-4);
    let mid = 2e-4 + 0.5 * 8e-4 * (1.0 + std::f64::consts::FRAC_PI_2.cos());
    assert!((lr_at(1002.5, &c).unwrap() - 6e-4).abs() < 1e-15);
    assert_eq!(lr_at(1002.5, &c).unwrap(), mid);
}

#[test]
fn schedule_is_continuous_at_warmup_boundary() {
    let c = ScheduleConfig::default();
    let left = lr_at(5.0 - 1e-12, &c).unwrap();
    let right = lr_at(5.0, &c).unwrap();
    assert!((left - right).abs() < 1e-15);
    let warm_end = c.warmup_lr + (c.base_lr - c.warmup_lr) * 1.0;
    assert_eq!(warm_end, right);
}

#[test]
fn schedule_is_monotone_in_each_phase() {
    let c = ScheduleConfig::default();
    let mut prev = lr_at(0.0, &c).unwrap();
    for i in 1..=500 {
        let lr = lr_at(i as f64 * 0.01, &c).unwrap();
        assert!(lr >= prev);
        prev = lr;
    }
    for i in 0..=19950 {
        let lr = lr_at(5.0 + i as f64 * 0.1, &c).unwrap();
        assert!(lr <= prev, "increase at epoch {}", 5.0 + i as f64 * 0.1);
        prev = lr;
    }
}

#[test]
fn schedule_rejects_out_of_range_epochs() {
    let c = ScheduleConfig::default();
    for e in [-1e-9, 2000.000001, f64::NAN, f64::INFINITY] {
        assert!(matches!(lr_at(e, &c), Err(Error::Range { .. })), "{e}");
    }
}

#[test]
fn per_step_and_per_epoch_schedules_agree_at_boundaries() {
    let c = ScheduleConfig { total_epochs: 60, warmup_epochs: 3, ..ScheduleConfig::default() };
    for steps_per_epoch in [1usize, 7, 13, 64] {
        for epoch in 0..=60usize {
            let step = epoch * steps_per_epoch;
            let frac = step as f64 / steps_per_epoch as f64;
            assert_eq!(lr_at(frac, &c).unwrap(), lr_at(epoch as f64, &c).unwrap());
        }
    }
}

#[test]
fn schedule_config_validation() {
    assert!(ScheduleConfig::default().validate().is_ok());
    let bad = [
        ScheduleConfig { warmup_epochs: 2000, ..Default::default() },
        ScheduleConfig { min_lr: 2e-3, ..Default::default() },
        ScheduleConfig { warmup_lr: 3e-4, ..Default::default() },
        ScheduleConfig { weight_decay: 0.0, ..Default::default() },
        ScheduleConfig { batch_size: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn zero_gradient_applies_decoupled_decay_only() {
    let vals = [0.5, -1.25, 3.0];
    let mut s = store_with(&vals, Some(&[0.0; 3]), ParamRole::Weight);
    let mut opt = AdamW::new(&s);
    let (lr, wd) = (1e-3, 0.05);
    for step in 1..=5 {
        s.tensor_mut("p").unwrap().grad = Some(vec![0.0; 3]);
        let before = s.tensor("p").unwrap().data().to_vec();
        opt.step(&mut s, lr, wd).unwrap();
        let after = s.tensor("p").unwrap().data();
        for (a, b) in after.iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - lr * wd));
        }
        assert!(opt.moments["p"].m.iter().chain(&opt.moments["p"].v).all(|&x| x == 0.0));
        assert_eq!(opt.t, step);
    }
}

#[test]
fn no_decay_role_is_exempt() {
    let mut s = store_with(&[2.0], Some(&[0.0]), ParamRole::NoDecay);
    let mut opt = AdamW::new(&s);
    opt.step(&mut s, 1e-2, 0.5).unwrap();
    assert_eq!(s.tensor("p").unwrap().data(), &[2.0]);
}

#[test]
fn zero_learning_rate_is_identity() {
    let vals = [0.3, -0.7, 1e-3];
    let mut s = store_with(&vals, Some(&[1.0, -2.0, 0.5]), ParamRole::Weight);
    let mut opt = AdamW::new(&s);
    for _ in 0..3 {
        opt.step(&mut s, 0.0, 1e-2).unwrap();
    }
    assert_eq!(s.tensor("p").unwrap().data(), &vals);
}

#[test]
fn first_step_matches_scalar_reference() {
    let vals = [0.4, -0.2, 1.5, 0.0];
    let grads = [0.3, -2.0, 1e-6, 5.0];
    let lr = 1e-3;
    let mut s = store_with(&vals, Some(&grads), ParamRole::Weight);
    let mut opt = AdamW::new(&s);
    opt.step(&mut s, lr, 0.0).unwrap();
    for i in 0..4 {
        let mut r = ScalarAdamW::new(vals[i]);
        r.step(grads[i], lr, 0.0);
        let got = s.tensor("p").unwrap().data()[i];
        assert!((got - r.theta).abs() <= 1e-15 * r.theta.abs().max(1.0), "{i}: {got} vs {}", r.theta);
        // First bias-corrected step moves by lr·g/(|g| + eps).
        let delta = vals[i] - got;
        let expect = lr * grads[i] / (grads[i].abs() + 1e-8);
        assert!((delta - expect).abs() < 1e-15, "{i}");
    }
}

#[test]
fn multi_step_trajectory_matches_scalar_reference() {
    let lr = 3e-3;
    let wd = 0.1;
    let theta0 = [0.8, -0.3];
    let mut s = store_with(&theta0, None, ParamRole::Weight);
    let mut opt = AdamW::new(&s);
    let mut refs: Vec<ScalarAdamW> = theta0.iter().map(|&t| ScalarAdamW::new(t)).collect();
    for k in 0..200 {
        let g: Vec<f64> = (0..2).map(|i| ((k * 7 + i * 3) as f64 * 0.37).sin()).collect();
        s.tensor_mut("p").unwrap().grad = Some(g.clone());
        opt.step(&mut s, lr, wd).unwrap();
        for (r, gi) in refs.iter_mut().zip(&g) {
            r.step(*gi, lr, wd);
        }
    }
    for (i, r) in refs.iter().enumerate() {
        let got = s.tensor("p").unwrap().data()[i];
        assert!((got - r.theta).abs() < 1e-13, "{got} vs {}", r.theta);
    }
}

#[test]
fn constant_gradient_update_converges_to_lr() {
    let lr = 1e-3;
    for g in [0.25, -4.0] {
        let mut s = store_with(&[0.0], None, ParamRole::Weight);
        let mut opt = AdamW::new(&s);
        let mut last = 0.0;
        for _ in 0..1000 {
            s.tensor_mut("p").unwrap().grad = Some(vec![g]);
            let before = s.tensor("p").unwrap().data()[0];
            opt.step(&mut s, lr, 0.0).unwrap();
            last = (s.tensor("p").unwrap().data()[0] - before).abs();
        }
        assert!((last - lr).abs() < 0.01 * lr, "{last}");
    }
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let mut s = store_with(&[1.0], None, ParamRole::Weight);
    let mut opt = AdamW::new(&s);
    assert!(matches!(opt.step(&mut s, 1e-3, 0.0), Err(Error::Contract(_))));
    assert_eq!(opt.t, 0);
    assert_eq!(s.tensor("p").unwrap().data(), &[1.0]);
}

#[test]
fn running_stats_are_left_alone() {
    let mut s = store_with(&[1.0], Some(&[1.0]), ParamRole::Weight);
    s.insert("bn.running_var", Tensor::full([2], 3.0), ParamRole::RunningStat).unwrap();
    let mut opt = AdamW::new(&s);
    assert!(!opt.moments.contains_key("bn.running_var"));
    opt.step(&mut s, 1e-2, 1e-2).unwrap();
    assert_eq!(s.tensor("bn.running_var").unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn zero_grads_resets_and_next_backward_is_fresh() {
    let cfg = ModelConfig::miniature();
    let mut model = Model::new(cfg.clone()).unwrap();
    let images = Tensor::from_fn([2, 3, 64, 64], |i| (i % 17) as f64 / 17.0);
    let labels = [1, 3];

    model.train_step_grads(&images, &labels, NormMode::Eval).unwrap();
    let fresh: Vec<Vec<f64>> = model.params.iter().filter_map(|(_, e)| e.tensor.grad.clone()).collect();
    model.train_step_grads(&images, &labels, NormMode::Eval).unwrap();

    zero_grads(&mut model.params);
    for (_, e) in model.params.iter().filter(|(_, e)| e.role.trainable()) {
        assert!(e.tensor.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }
    zero_grads(&mut model.params);
    for (_, e) in model.params.iter().filter(|(_, e)| e.role.trainable()) {
        assert!(e.tensor.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }

    model.train_step_grads(&images, &labels, NormMode::Eval).unwrap();
    let again: Vec<Vec<f64>> = model.params.iter().filter_map(|(_, e)| e.tensor.grad.clone()).collect();
    assert_eq!(fresh, again);
}
