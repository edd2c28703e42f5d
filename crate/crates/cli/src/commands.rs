use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use uniblend::data::{generate_dataset, read_ppm, write_pgm, write_ppm};
use uniblend::gradcheck::run_grad_suite;
use uniblend::model::checkpoint::{load_params, save_params};
use uniblend::model::{infer as run_model, SIZE_MULTIPLE};
use uniblend::train::{evaluate_split, train_loop};
use uniblend::{Error, LossWeights, ModelConfig, Precision, TrainConfig, UniBlendNet};

use crate::{EvalArgs, Failure, GenDataArgs, GradCheckArgs, InferArgs, TrainArgs};

type Outcome = Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(Error::Io { path: path.to_path_buf(), source: e })
}

fn parse_weights(s: &str) -> Result<LossWeights, Failure> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--weights: {e}")))?;
    let [a1, a2, a3, lam] = parts[..] else {
        return Err(Failure::Usage(format!("--weights needs 4 comma-separated values, got {}", parts.len())));
    };
    LossWeights::new(a1, a2, a3, lam).map_err(|e| Failure::Usage(e.to_string()))
}

pub fn gen_data(a: GenDataArgs) -> Outcome {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    let meta = generate_dataset(&a.out, a.count, a.size, a.seed, a.blobs)?;
    log::info!("wrote {} pairs of {}x{} to {}", meta.count, meta.size, meta.size, a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Outcome {
    let weights = match &a.weights {
        Some(s) => parse_weights(s)?,
        None => LossWeights::default(),
    };
    if a.steps == 0 || a.batch == 0 || !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(Failure::Usage("--steps, --batch and --lr must be positive".into()));
    }
    if a.crop == 0 || !a.crop.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Failure::Usage(format!("--crop must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    let cfg = TrainConfig {
        model: ModelConfig {
            base_channels: a.channels,
            context_channels: a.context_channels,
            use_mask: !a.no_mask,
            use_saam: !a.no_saam,
            use_context: !a.no_context,
        },
        weights,
        steps: a.steps,
        batch: a.batch,
        crop: a.crop,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    UniBlendNet::new(cfg.model).map_err(|e| Failure::Usage(e.to_string()))?;

    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(io_err(p))?)),
        None => None,
    };
    let log_path = a.log.clone().unwrap_or_default();
    let every = (cfg.steps / 10).max(1);
    let report = train_loop(&a.data, &cfg, &mut |row| {
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(row)?;
            writeln!(f, "{line}").map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
        }
        if row.step % every == 0 || row.step + 1 == cfg.steps {
            log::info!("step {:>5}  total {:.5}", row.step, row.losses.total);
        }
        Ok(())
    })?;
    if let (Some(mut f), Some(p)) = (log_file, &a.log) {
        f.flush().map_err(io_err(p))?;
    }
    save_params(&report.params, &cfg.model, &a.out)?;
    log::info!("saved {}", a.out.display());
    Ok(())
}

/// Shifts a signed residual so that zero lands on mid grey.
fn residual_image(r: &uniblend::Tensor<f32>) -> uniblend::Tensor<f32> {
    let mut out = r.clone();
    out.data_mut().iter_mut().for_each(|v| *v = 0.5 + *v / 2.0);
    out
}

pub fn infer(a: InferArgs) -> Outcome {
    let (params, config) = load_params(&a.model)?;
    let net = UniBlendNet::new(config)?;
    let input = read_ppm::<f32>(&a.input)?;
    let out = run_model(&net, &params, &input)?;
    write_ppm(&out.restored, &a.output)?;
    if let Some(p) = &a.dump_mask {
        write_pgm(&out.mask, p)?;
    }
    if let Some(p) = &a.dump_residual {
        write_ppm(&residual_image(&out.residual), p)?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let (params, config) = load_params(&a.model)?;
    let net = UniBlendNet::new(config)?;
    let report = evaluate_split(&net, &params, &a.data)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(&a.report, json).map_err(io_err(&a.report))?;
    println!(
        "psnr {:.3} dB (input {:.3})  ssim {:.4} (input {:.4})  images {}  skipped {}",
        report.mean_psnr,
        report.baseline_psnr,
        report.mean_ssim,
        report.baseline_ssim,
        report.per_image.len(),
        report.skipped
    );
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> Outcome {
    let precision = if a.f64 { Precision::F64 } else { Precision::F32 };
    let report = run_grad_suite(a.seed, precision)?;
    for op in &report.ops {
        println!(
            "{:<16} {:>3} entries  max rel err {:.3e}  {}",
            op.op,
            op.entries,
            op.max_rel_err,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect();
    if failed.is_empty() {
        println!("all {} probes within {:e} ({:?})", report.ops.len(), report.tolerance, precision);
        Ok(())
    } else {
        Err(Failure::Check(format!("{} above {:e}", failed.join(", "), report.tolerance)))
    }
}
