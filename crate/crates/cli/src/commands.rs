use std::fs;
use std::path::Path;

use attn_removal::analysis::{export_cluster_panels, export_run_heatmaps};
use attn_removal::datagen::{gen_corpus, read_corpus, write_corpus, SceneSpec};
use attn_removal::denoiser::{load_checkpoint, save_checkpoint, train, Checkpoint, DenoiserConfig, TrainOptions};
use attn_removal::eval::{background_drift, removal_report};
use attn_removal::io::{read_image, read_mask, write_image, Manifest};
use attn_removal::numerics::Rng;
use attn_removal::pipelines::{reconstruct, remove, Pipeline, RemovalConfig, RunOptions};
use attn_removal::scheduler::NoiseSchedule;
use attn_removal::{Error, Exec, Result};
use log::info;

use crate::args::{Cli, Cmd, ModelArg, PipelineArg, RemovalArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(cli, a),
        Cmd::Train(a) => train_cmd(cli, a),
        Cmd::Remove(a) => remove_cmd(cli, a),
        Cmd::Invert(a) => invert_cmd(cli, a),
        Cmd::Analyze(a) => analyze_cmd(cli, a),
        Cmd::Eval(a) => eval_cmd(cli, a),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Run manifest with the command, version and thread setting.
fn run_manifest(cli: &Cli, command: &str) -> Manifest {
    let mut m = Manifest::new();
    m.set("command", command)
        .set("version", env!("CARGO_PKG_VERSION"))
        .set("jobs", cli.jobs.map_or("auto".to_string(), |j| j.to_string()));
    m
}

fn removal_config(a: &RemovalArgs) -> Result<RemovalConfig> {
    let pipeline = match a.pipeline {
        PipelineArg::Sip => Pipeline::Sip,
        PipelineArg::Dip => Pipeline::Dip,
    };
    let d = RemovalConfig::defaults(pipeline);
    let cfg = RemovalConfig {
        pipeline,
        steps: a.steps.unwrap_or(d.steps),
        ss_cutoff: a.ss_cutoff.unwrap_or(d.ss_cutoff),
        s: a.s,
        lambda: a.lambda,
        seed: a.seed,
        inversion_refine: a.refine,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cli: &Cli, a: &crate::args::GenData) -> Result<()> {
    let base = if a.twin { SceneSpec::twins() } else { SceneSpec::default() };
    let spec = SceneSpec {
        size: a.size,
        channels: a.channels,
        twin: a.twin,
        min_coverage: a.min_coverage.unwrap_or(base.min_coverage),
        max_coverage: a.max_coverage.unwrap_or(base.max_coverage),
        ..base
    };
    spec.validate()?;
    let scenes = gen_corpus(a.seed, a.count, &spec, Exec::Parallel)?;
    write_corpus(&scenes, &spec, &a.out)?;
    let mut m = run_manifest(cli, "gen-data");
    m.set("seed", a.seed).set("count", a.count);
    m.save(a.out.join("run.txt"))?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &crate::args::Train) -> Result<()> {
    let (scenes, spec) = read_corpus(&a.data)?;
    let n = a.limit.unwrap_or(scenes.len()).min(scenes.len());
    let data: Vec<_> = scenes.into_iter().take(n).map(|s| s.composite).collect();
    let config = match a.model {
        ModelArg::Default => DenoiserConfig::default(),
        ModelArg::Small => DenoiserConfig::small(),
        ModelArg::Micro => DenoiserConfig::micro(),
    };
    if config.image_size != spec.size || config.channels != spec.channels {
        return Err(Error::Config(format!(
            "model expects {0}×{0}×{1} images, corpus has {2}×{2}×{3}",
            config.image_size, config.channels, spec.size, spec.channels
        )));
    }
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        cosine_to: a.cosine_to,
        max_steps: a.max_steps,
        log_every: a.log_every,
        exec: Exec::Parallel,
        ..TrainOptions::default()
    };
    let sched = NoiseSchedule::default_with_steps(50)?;
    out_dir(&a.out)?;
    let start = std::time::Instant::now();
    let (model, report) = train(config.clone(), &data, &sched, &mut Rng::new(a.seed), &opts)?;
    let ckpt = a.out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &model, &sched)?;
    let losses: String = std::iter::once("step,loss\n".to_string())
        .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
        .collect();
    write_text(&a.out.join("losses.csv"), &losses)?;
    let mut m = run_manifest(cli, "train");
    m.set("data", a.data.display())
        .set("scenes", n)
        .set("seed", a.seed)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("lr", a.lr)
        .set("cosine_to", a.cosine_to.map_or("none".into(), |r| r.to_string()))
        .set("max_steps", a.max_steps.map_or("none".into(), |s| s.to_string()))
        .set("steps_run", report.steps)
        .set("params", model.param_count())
        .set("seconds", format!("{:.1}", start.elapsed().as_secs_f64()));
    m.extend("model.", config.to_entries());
    m.save(a.out.join("run.txt"))?;
    println!(
        "trained {} steps, final loss {:.5}, checkpoint {}",
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn load_inputs(image: &Path, mask: &Path, ckpt: &Path) -> Result<(Checkpoint, attn_removal::numerics::Tensor<f32>, attn_removal::numerics::Tensor<f32>)> {
    let ck = load_checkpoint(ckpt)?;
    let img = read_image(image, ck.denoiser.config().channels)?;
    let m = read_mask(mask)?;
    Ok((ck, img, m))
}

fn remove_cmd(cli: &Cli, a: &crate::args::Remove) -> Result<()> {
    let cfg = removal_config(&a.removal)?;
    let (ck, img, m) = load_inputs(&a.image, &a.mask, &a.ckpt)?;
    let mask = ck.denoiser.removal_mask(m.clone())?;
    let opts = RunOptions {
        record_attention: a.trace,
        keep_latents: a.trace,
        ..RunOptions::default()
    };
    let (result, trace) = remove(&ck, &img, &mask, &cfg, &opts)?;
    out_dir(&a.out)?;
    write_image(a.out.join("result.png"), &result)?;
    if a.trace {
        trace.to_archive().save(a.out.join("trace.bin"))?;
    }
    let drift = background_drift(&result, &img, &m)?;
    let mut mf = run_manifest(cli, "remove");
    mf.set("image", a.image.display())
        .set("mask", a.mask.display())
        .set("ckpt", a.ckpt.display())
        .set("background_drift", drift)
        .set("seconds", format!("{:.2}", trace.seconds));
    mf.extend("removal.", cfg.to_entries());
    mf.save(a.out.join("manifest.txt"))?;
    println!("wrote {} ({:.1}s)", a.out.join("result.png").display(), trace.seconds);
    Ok(())
}

fn invert_cmd(cli: &Cli, a: &crate::args::Invert) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let img = read_image(&a.image, ck.denoiser.config().channels)?;
    let rec = reconstruct(&ck, &img, a.steps, a.refine)?;
    let err = rec.max_abs_diff(&img)?;
    out_dir(&a.out)?;
    write_image(a.out.join("reconstruction.png"), &rec)?;
    let mut m = run_manifest(cli, "invert");
    m.set("image", a.image.display())
        .set("ckpt", a.ckpt.display())
        .set("steps", a.steps)
        .set("refine", a.refine)
        .set("max_abs_error", err);
    m.save(a.out.join("manifest.txt"))?;
    println!("round-trip max abs error {err:.3e}");
    Ok(())
}

fn analyze_cmd(cli: &Cli, a: &crate::args::Analyze) -> Result<()> {
    let cfg = removal_config(&a.removal)?;
    let (ck, img, m) = load_inputs(&a.image, &a.mask, &a.ckpt)?;
    let mask = ck.denoiser.removal_mask(m)?;
    let opts = RunOptions {
        record_attention: true,
        ..RunOptions::default()
    };
    let (result, trace) = remove(&ck, &img, &mask, &cfg, &opts)?;
    out_dir(&a.out)?;
    write_image(a.out.join("result.png"), &result)?;
    let heatmaps = export_run_heatmaps(&trace.records, &a.out, a.scale, Exec::Parallel)?;
    let panels = export_cluster_panels(&trace.records, &a.out, a.k, a.scale, &mut Rng::new(cfg.seed))?;
    info!("{} heatmaps, {} cluster panels", heatmaps.len(), panels.len());
    let mut mf = run_manifest(cli, "analyze");
    mf.set("image", a.image.display())
        .set("mask", a.mask.display())
        .set("ckpt", a.ckpt.display())
        .set("k", a.k)
        .set("scale", a.scale)
        .set("heatmaps", heatmaps.len())
        .set("panels", panels.len());
    mf.extend("removal.", cfg.to_entries());
    mf.save(a.out.join("manifest.txt"))?;
    println!("wrote {} heatmaps and {} cluster panels under {}", heatmaps.len(), panels.len(), a.out.display());
    Ok(())
}

/// Parses `key=v1,v2,…` into one configuration per value.
pub fn sweep_configs(base: &RemovalConfig, sweep: &str) -> Result<Vec<RemovalConfig>> {
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep `{sweep}` is not key=v1,v2,…")))?;
    let bad = |v: &str| Error::Config(format!("sweep value `{v}` is not valid for `{key}`"));
    values
        .split(',')
        .map(|v| {
            let v = v.trim();
            let mut c = base.clone();
            match key.trim() {
                "s" => c.s = v.parse().map_err(|_| bad(v))?,
                "lambda" => c.lambda = v.parse().map_err(|_| bad(v))?,
                "steps" => c.steps = v.parse().map_err(|_| bad(v))?,
                "ss_cutoff" | "ss-cutoff" => c.ss_cutoff = v.parse().map_err(|_| bad(v))?,
                "seed" => c.seed = v.parse().map_err(|_| bad(v))?,
                k => return Err(Error::Config(format!("cannot sweep over `{k}`"))),
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

fn eval_cmd(cli: &Cli, a: &crate::args::Eval) -> Result<()> {
    let base = removal_config(&a.removal)?;
    let configs = match &a.sweep {
        Some(s) => sweep_configs(&base, s)?,
        None => vec![base],
    };
    let ck = load_checkpoint(&a.ckpt)?;
    let (mut scenes, _) = read_corpus(&a.data)?;
    if let Some(n) = a.limit {
        scenes.truncate(n);
    }
    let report = removal_report(&scenes, &ck, &configs, Exec::Parallel)?;
    out_dir(&a.out)?;
    let table = report.to_table();
    write_text(&a.out.join("report.txt"), &table)?;
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    write_text(&a.out.join("scenes.csv"), &report.scenes_csv())?;
    let mut m = run_manifest(cli, "eval");
    m.set("data", a.data.display())
        .set("ckpt", a.ckpt.display())
        .set("scenes", scenes.len())
        .set("sweep", a.sweep.as_deref().unwrap_or("none"))
        .set("seconds", format!("{:.1}", report.seconds));
    for (i, c) in configs.iter().enumerate() {
        m.extend(&format!("config.{i}."), c.to_entries());
    }
    m.save(a.out.join("manifest.txt"))?;
    print!("{table}");
    Ok(())
}
