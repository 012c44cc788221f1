//! Temperature and interpolation ablations, and the model cost report.

use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::model::{Model, ParamBreakdown};
use crate::resample::{compare_kernels, KernelSpec};
use crate::tensor::{Graph, Real};
use crate::training::{train, PreparedData};

/// Attention temperature multipliers, in units of `sqrt(d_k)`.
pub const TEMPERATURE_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TempRow {
    pub multiplier: f64,
    /// Validation top-1 accuracy after the last epoch.
    pub val_acc: f64,
    pub best_val_acc: f64,
    pub seed: u64,
}

/// Trains one model per multiplier with otherwise identical settings.
pub fn ablate_temp(base: &RunConfig, data: &PreparedData, mut on_row: impl FnMut(&TempRow)) -> Result<Vec<TempRow>> {
    let mut rows = Vec::with_capacity(TEMPERATURE_MULTIPLIERS.len());
    for &c in &TEMPERATURE_MULTIPLIERS {
        let mut cfg = base.clone();
        cfg.model.temperature_multiplier = c;
        cfg.model.num_classes = data.num_classes;
        cfg.validate()?;
        let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
        let out = train(&mut model, &data.train, &data.val, &cfg.train, |_, _, _| Ok(()))?;
        let row = TempRow {
            multiplier: c,
            val_acc: out.history.last().map_or(0.0, |r| r.val_acc),
            best_val_acc: out.best_val_acc,
            seed: cfg.train.seed,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn temp_csv(rows: &[TempRow]) -> String {
    let mut s = String::from("multiplier,val_acc,best_val_acc,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.multiplier, r.val_acc, r.best_val_acc, r.seed));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpRow {
    pub kernel: String,
    /// Mean PSNR over all (image, size) cases; infinite if every case
    /// matched the reference.
    pub psnr: f64,
    /// Total resampling time over all cases.
    pub seconds: f64,
    pub cases: usize,
}

/// Runs every kernel on every image at every output size and aggregates
/// per kernel. An empty image set gives an empty table.
pub fn ablate_interp(images: &[ImageBuffer], sizes: &[(usize, usize)]) -> Result<Vec<InterpRow>> {
    if images.is_empty() || sizes.is_empty() {
        return Ok(Vec::new());
    }
    let kernels = KernelSpec::all();
    let mut psnr = vec![0.0f64; kernels.len()];
    let mut seconds = vec![0.0f64; kernels.len()];
    let mut cases = 0;
    for img in images {
        for &(h, w) in sizes {
            let rows = compare_kernels(img, h, w, &kernels)?;
            for (i, r) in rows.iter().enumerate() {
                psnr[i] += r.psnr;
                seconds[i] += r.seconds;
            }
            cases += 1;
        }
    }
    Ok(kernels
        .iter()
        .enumerate()
        .map(|(i, k)| InterpRow {
            kernel: k.to_string(),
            psnr: psnr[i] / cases as f64,
            seconds: seconds[i],
            cases,
        })
        .collect())
}

pub fn interp_csv(rows: &[InterpRow]) -> String {
    let mut s = String::from("kernel,psnr,seconds,cases\n");
    for r in rows {
        let psnr = if r.psnr.is_infinite() { "inf".to_string() } else { r.psnr.to_string() };
        s.push_str(&format!("{},{psnr},{},{}\n", r.kernel, r.seconds, r.cases));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Throughput {
    pub batch: usize,
    pub passes: usize,
    pub seconds: f64,
    pub images_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub params_embedding: usize,
    pub params_per_block: usize,
    pub params_encoder: usize,
    pub params_head: usize,
    pub flops: u64,
    pub flops_formula: String,
    pub tokens: usize,
    pub throughput: Vec<Throughput>,
}

pub const FLOPS_FORMULA: &str =
    "2 * (N*E*d + L*(3*n*d^2 + 2*n^2*d + n*d^2 + 2*n*d*r) + sum(head_in*head_out)); N patches, n tokens, E patch elements, r encoder MLP width";

/// Times inference-only forward passes on a zero batch.
pub fn measure_throughput<T: Real>(model: &Model<T>, batch: usize, warmup: usize, passes: usize) -> Result<Throughput> {
    if batch == 0 || passes == 0 {
        return Err(Error::InvalidArgument("batch and passes must be positive".into()));
    }
    let cfg = model.config();
    let rows = vec![T::zero(); batch * cfg.num_patches() * model.embed().input_elements()];
    let shape = vec![batch * cfg.num_patches(), model.embed().input_elements()];
    let run = || -> Result<()> {
        let mut g = Graph::inference();
        let p = model.params().bind(&mut g);
        let x = g.constant(shape.clone(), rows.clone())?;
        model.forward(&mut g, &p, x, batch, None)?;
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let start = Instant::now();
    for _ in 0..passes {
        run()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Throughput {
        batch,
        passes,
        seconds,
        images_per_sec: (batch * passes) as f64 / seconds,
    })
}

pub fn cost_report<T: Real>(model: &Model<T>, batches: &[usize], warmup: usize, passes: usize) -> Result<CostReport> {
    let ParamBreakdown {
        embedding,
        per_block,
        encoder,
        head,
        total,
        ..
    } = model.param_breakdown();
    debug_assert_eq!(total, model.count_params());
    Ok(CostReport {
        params: model.count_params(),
        params_embedding: embedding,
        params_per_block: per_block,
        params_encoder: encoder,
        params_head: head,
        flops: model.estimate_flops(),
        flops_formula: FLOPS_FORMULA.to_string(),
        tokens: model.config().tokens_per_image(),
        throughput: batches
            .iter()
            .map(|&b| measure_throughput(model, b, warmup, passes))
            .collect::<Result<_>>()?,
    })
}
