use patchformer::augment::LabeledImage;
use patchformer::image::ImageBuffer;
use patchformer::model::{Model, ModelConfig};
use patchformer::rng::substream;
use patchformer::tensor::{Graph, ParamStore, Tensor};
use patchformer::training::{evaluate, lr_at, train, train_step, AdamW, AdamWConfig, TrainConfig};
use patchformer::Error;
use rand::Rng;

fn adamw(wd: f64) -> AdamWConfig {
    AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    }
}

fn store_with(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(vec![values.len()], values).unwrap());
    s
}

fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
    let t = &mut s.tensors_mut()[0];
    t.zero_grad();
    t.accumulate_grad(g);
}

#[test]
fn zero_gradient_applies_pure_decay() {
    let init = [1.5, -0.25, 3.0];
    let mut s = store_with(&init);
    let mut opt = AdamW::new(adamw(0.01), &s);
    set_grad(&mut s, &[0.0; 3]);
    opt.step(&mut s, 0.1);
    for (p, x) in s.tensors()[0].data().iter().zip(init) {
        assert_eq!(*p, x * (1.0 - 0.1 * 0.01));
    }
}

#[test]
fn no_gradient_no_decay_is_a_no_op() {
    let init = [0.3, -0.7];
    let mut s = store_with(&init);
    let mut opt = AdamW::new(adamw(0.0), &s);
    for _ in 0..5 {
        set_grad(&mut s, &[0.0, 0.0]);
        opt.step(&mut s, 0.01);
    }
    assert_eq!(s.tensors()[0].data(), &init);
    assert_eq!(opt.steps(), 5);
}

#[test]
fn constant_gradient_steps_by_lr() {
    let mut s = store_with(&[0.0, 0.0]);
    let mut opt = AdamW::new(adamw(0.0), &s);
    let lr = 1e-3;
    for _ in 0..100 {
        let prev = s.tensors()[0].data().to_vec();
        set_grad(&mut s, &[0.5, -2.0]);
        opt.step(&mut s, lr);
        for (now, before) in s.tensors()[0].data().iter().zip(&prev) {
            let step = (now - before).abs();
            assert!(((step - lr) / lr).abs() < 1e-4, "step {step}");
        }
    }
    let p = s.tensors()[0].data();
    assert!(p[0] < 0.0 && p[1] > 0.0);
}

#[test]
fn one_step_descends_a_quadratic_bowl() {
    let centre = [1.0, -2.0, 0.5];
    let loss = |p: &[f64]| p.iter().zip(centre).map(|(x, c)| (x - c).powi(2)).sum::<f64>();
    let mut r = substream(1, "bowl", 0);
    for _ in 0..20 {
        let init: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut s = store_with(&init);
        let mut opt = AdamW::new(adamw(0.0), &s);
        let grad: Vec<f64> = init.iter().zip(centre).map(|(x, c)| 2.0 * (x - c)).collect();
        set_grad(&mut s, &grad);
        opt.step(&mut s, 1e-3);
        assert!(loss(s.tensors()[0].data()) < loss(&init));
    }
}

#[test]
fn soft_cross_entropy_examples() {
    let mut g = Graph::<f64>::inference();
    let uniform = g.constant(vec![2, 3], vec![0.7; 6]).unwrap();
    let l = g.cross_entropy_soft(uniform, &[1.0, 0.0, 0.0, 0.2, 0.3, 0.5]).unwrap();
    assert!((g.scalar_value(l) - 3f64.ln()).abs() < 1e-12);

    let sharp = g.constant(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap();
    let l = g.cross_entropy_soft(sharp, &[1.0, 0.0, 0.0]).unwrap();
    assert!(g.scalar_value(l) < 1e-20);

    let z = [1.2, -0.4, 0.3];
    let t = [0.7, 0.3, 0.0];
    let logits = g.constant(vec![1, 3], z.to_vec()).unwrap();
    let l = g.cross_entropy_soft(logits, &t).unwrap();
    let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
    let oracle: f64 = -t.iter().zip(z).map(|(p, v)| p * (v - lse)).sum::<f64>();
    assert!((g.scalar_value(l) - oracle).abs() < 1e-6);
}

#[test]
fn schedule_tail() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), cfg.lr / 5.0);
    assert_eq!(lr_at(cfg.warmup_epochs, &cfg), cfg.lr);
    assert!(lr_at(cfg.epochs - 1, &cfg) <= 0.02 * cfg.lr);
    for e in 1..cfg.epochs {
        if e > cfg.warmup_epochs {
            assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
        }
    }
}

fn tiny_model(k: usize, seed: u64) -> Model<f32> {
    Model::new(
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            dim: 16,
            heads: 2,
            layers: 2,
            mlp_head_units: vec![16],
            num_classes: k,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Bright square in one quadrant per class.
fn quadrant_set(n: usize, k: usize, seed: u64) -> Vec<LabeledImage> {
    let mut r = substream(seed, "quad", 0);
    (0..n)
        .map(|i| {
            let c = i % k;
            let img = ImageBuffer::from_fn(8, 8, 3, |y, x, _| {
                let q = (y / 4) * 2 + x / 4;
                if q == c { 0.9 } else { 0.1 }
            })
            .unwrap();
            let mut img = img;
            img.pixels_mut().iter_mut().for_each(|p| *p += r.random_range(-0.05..0.05));
            LabeledImage::one_hot(img, c, k).unwrap()
        })
        .collect()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        epochs,
        warmup_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn fresh_model_loss_is_near_ln_k() {
    for k in [2, 3, 4] {
        let mut model = tiny_model(k, 3);
        let data = quadrant_set(16, k, 1);
        let mut opt = AdamW::new(quick_cfg(1).adamw(), model.params());
        let loss = train_step(&mut model, &mut opt, &data, 1e-3, None).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 0.2, "k={k}: {loss}");
    }
}

#[test]
fn memorises_a_single_sample() {
    let mut model = tiny_model(2, 4);
    let data = vec![quadrant_set(2, 2, 2).remove(1)];
    let out = train(&mut model, &data, &[], &quick_cfg(15), |_, _, _| Ok(())).unwrap();
    assert_eq!(out.history.last().unwrap().train_acc, 1.0);
}

#[test]
fn learns_quadrants_and_evaluates_without_side_effects() {
    let mut model = tiny_model(4, 5);
    let train_set = quadrant_set(64, 4, 3);
    let val = quadrant_set(16, 4, 4);
    let cfg = TrainConfig {
        cutmix_prob: 0.0,
        ..quick_cfg(40)
    };
    let out = train(&mut model, &train_set, &val, &cfg, |_, _, _| Ok(())).unwrap();
    let last = out.history.last().unwrap();
    assert!(last.train_acc >= 0.95 && last.val_acc >= 0.9, "{last:?}");
    let before: Vec<Vec<f32>> = model.params().tensors().iter().map(|t| t.data().to_vec()).collect();
    let ev = evaluate(&model, &val, 5).unwrap();
    assert_eq!(ev.accuracy, last.val_acc);
    let after: Vec<Vec<f32>> = model.params().tensors().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(before, after);
    assert!(model.params().tensors().iter().all(|t| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite()))));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let mut model = tiny_model(3, 6);
        let data = quadrant_set(30, 3, 5);
        let out = train(&mut model, &data, &data[..6], &quick_cfg(3), |_, _, _| Ok(())).unwrap();
        let params: Vec<Vec<f32>> = model.params().tensors().iter().map(|t| t.data().to_vec()).collect();
        (out.history, params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn exploding_run_reports_where() {
    let mut model = tiny_model(2, 7);
    let data = quadrant_set(16, 2, 6);
    let cfg = TrainConfig {
        lr: 1e38,
        warmup_epochs: 0,
        ..quick_cfg(3)
    };
    match train(&mut model, &data, &[], &cfg, |_, _, _| Ok(())) {
        Err(Error::NonFiniteLoss { epoch, batch, loss }) => {
            assert!(!loss.is_finite());
            assert!(epoch < 3 && batch < 2);
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn best_epoch_is_reported() {
    let mut model = tiny_model(4, 8);
    let data = quadrant_set(32, 4, 7);
    let mut seen = Vec::new();
    let out = train(&mut model, &data, &data[..8], &quick_cfg(4), |rec, _, best| {
        seen.push((rec.epoch, best));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 4);
    assert!(seen[0].1);
    let max = out.history.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert_eq!(out.best_val_acc, max);
    assert_eq!(out.history[out.best_epoch].val_acc, max);
}
