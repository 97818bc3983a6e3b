//! Subcommand implementations. Output files are written atomically
//! (temporary file in the target directory, then rename).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use voxdiff_core::checkpoint::Checkpoint;
use voxdiff_core::config::RunConfig;
use voxdiff_core::metrics;
use voxdiff_core::phantom::{synthesize_pair, PhantomSpec};
use voxdiff_core::pipeline::{extract_patch, sliding_window_generate, window_offsets};
use voxdiff_core::stats::paired_t_test;
use voxdiff_core::train::{TrainItem, Trainer};
use voxdiff_core::volume::{denormalize_ct, normalize_ct, normalize_minmax, IntensitySpace};
use voxdiff_core::{SwinVnet, Volume};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(#[from] voxdiff_core::config::ConfigError),
    #[error("volume: {0}")]
    Volume(#[from] voxdiff_core::volume::VolumeError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] voxdiff_core::checkpoint::CheckpointError),
    #[error("model: {0}")]
    Model(#[from] voxdiff_core::model::ModelError),
    #[error("training: {0}")]
    Train(#[from] voxdiff_core::train::TrainError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] voxdiff_core::pipeline::PipelineError),
    #[error("metrics: {0}")]
    Metrics(#[from] voxdiff_core::metrics::MetricError),
    #[error("statistics: {0}")]
    Stats(#[from] voxdiff_core::stats::StatsError),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Writes bytes atomically: a unique temporary sibling, then rename.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into()),
        std::process::id()
    ));
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_extents(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Usage(format!("bad extents {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("extents must be HxWxL, got {s:?}")))
}

fn apply_overrides(config: &mut RunConfig, sets: &[String]) -> Result<()> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn pair_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("pair_{index:03}_mr.vxvol")),
        dir.join(format!("pair_{index:03}_ct.vxvol")),
    )
}

pub fn phantom(out: &Path, count: usize, extents: &str, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(CliError::Usage("count must be positive".into()));
    }
    let ext = parse_extents(extents)?;
    std::fs::create_dir_all(out)?;
    let spec = PhantomSpec {
        extents: ext,
        ..PhantomSpec::default()
    };
    let start = Instant::now();
    let mut manifest = String::new();
    for i in 0..count {
        let (mr, ct) = synthesize_pair(&spec, seed.wrapping_add(i as u64))?;
        let (mr_path, ct_path) = pair_paths(out, i);
        write_atomic(&mr_path, |p| Ok(mr.save(p)?))?;
        write_atomic(&ct_path, |p| Ok(ct.save(p)?))?;
        let _ = writeln!(
            manifest,
            "{}\t{}",
            mr_path.file_name().unwrap().to_string_lossy(),
            ct_path.file_name().unwrap().to_string_lossy()
        );
    }
    write_atomic(&out.join("manifest.tsv"), |p| {
        Ok(std::fs::write(p, &manifest)?)
    })?;
    println!(
        "phantom: wrote {count} pairs ({extents}) to {} in {:.2}s",
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Reads the manifest of a data directory: one `mr-file<TAB>ct-file` line
/// per pair.
fn read_pairs(data: &Path) -> Result<Vec<(Volume, Volume)>> {
    let manifest = data.join("manifest.tsv");
    let text = std::fs::read_to_string(&manifest).map_err(|e| {
        CliError::Usage(format!(
            "cannot read manifest {}: {e}",
            manifest.display()
        ))
    })?;
    let mut pairs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (mr_name, ct_name) = line.split_once('\t').ok_or_else(|| {
            CliError::Usage(format!("malformed manifest line {line:?}"))
        })?;
        pairs.push((
            Volume::load(&data.join(mr_name.trim()))?,
            Volume::load(&data.join(ct_name.trim()))?,
        ));
    }
    if pairs.is_empty() {
        return Err(CliError::Usage("manifest lists no volume pairs".into()));
    }
    Ok(pairs)
}

/// Normalized overlapping patches of every pair, in deterministic order.
fn build_items(pairs: &[(Volume, Volume)], patch: [usize; 3]) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for (mr, ct) in pairs {
        if mr.extents != ct.extents {
            return Err(CliError::Usage(format!(
                "pair extents differ: {:?} vs {:?}",
                mr.extents, ct.extents
            )));
        }
        let mrn = normalize_minmax(mr)?;
        let ctn = normalize_ct(ct)?;
        let mr_vals = mrn.to_f64();
        let ct_vals = ctn.to_f64();
        for off in window_offsets(mr.extents, patch)? {
            items.push(TrainItem {
                extents: patch,
                cond: extract_patch(&mr_vals, mr.extents, off, patch),
                target: extract_patch(&ct_vals, ct.extents, off, patch),
            });
        }
    }
    Ok(items)
}

pub fn train(
    data: &Path,
    out: &Path,
    config_file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    max_steps: Option<usize>,
) -> Result<()> {
    let mut config = RunConfig::profile("toy")?;
    if let Some(path) = config_file {
        config.apply_file(path)?;
    }
    apply_overrides(&mut config, sets)?;
    if let Some(s) = seed {
        config.seed = s;
    }

    let pairs = read_pairs(data)?;
    let items = build_items(&pairs, config.patch)?;
    let model = SwinVnet::new(config.swin_config(), config.seed)?;
    let mut trainer = Trainer::new(model, &config)?;

    std::fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut loss_log = String::from("step,total,noise_term,variational_term\n");
    let steps_per_epoch = items.len().div_ceil(config.batch_size);
    let step_budget = max_steps.unwrap_or(config.epochs * steps_per_epoch);
    while trainer.global_step() < step_budget {
        let stats = trainer.train_round(&items)?;
        let _ = writeln!(
            loss_log,
            "{},{},{},{}",
            trainer.global_step(),
            stats.total,
            stats.noise_term,
            stats.variational_term
        );
        let step = trainer.global_step();
        if step % 100 == 0 || step == step_budget {
            println!(
                "train: step {step}/{step_budget} loss {:.6} ({:.1}s)",
                stats.total,
                start.elapsed().as_secs_f64()
            );
        }
    }

    let ck = Checkpoint::from_model(&trainer.model, config.to_text());
    write_atomic(&out.join("model.vxdf"), |p| Ok(ck.save(p)?))?;
    write_atomic(&out.join("loss.csv"), |p| Ok(std::fs::write(p, &loss_log)?))?;
    write_atomic(&out.join("config.txt"), |p| {
        Ok(std::fs::write(p, config.to_text())?)
    })?;
    println!(
        "train: {} steps on {} patches from {} pairs in {:.1}s -> {}",
        trainer.global_step(),
        items.len(),
        pairs.len(),
        start.elapsed().as_secs_f64(),
        out.join("model.vxdf").display()
    );
    Ok(())
}

pub fn generate(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    sets: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut config = RunConfig::profile("toy")?;
    config.apply_text(&ck.config_text)?;
    apply_overrides(&mut config, sets)?;
    if let Some(s) = seed {
        config.seed = s;
    }

    let mut model = SwinVnet::new(config.swin_config(), 0)?;
    ck.apply_to(&mut model)?;

    let raw = Volume::load(input)?;
    let cond = match raw.space {
        IntensitySpace::Raw => normalize_minmax(&raw)?,
        IntensitySpace::Normalized => raw,
    };
    let schedule = voxdiff_core::NoiseSchedule::linear(config.max_timestep, config.beta_slope)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let steps = schedule
        .resample(config.reduced_steps)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let start = Instant::now();
    let generated = sliding_window_generate(
        &model,
        &cond,
        config.patch,
        &steps,
        config.runs,
        config.seed,
    )?;
    let output = denormalize_ct(&generated)?;
    write_atomic(out, |p| Ok(output.save(p)?))?;
    let config_sidecar = out.with_extension("config.txt");
    write_atomic(&config_sidecar, |p| {
        Ok(std::fs::write(p, config.to_text())?)
    })?;
    println!(
        "generate: {} -> {} ({} voxels, {} reverse steps x {} runs) in {:.1}s",
        input.display(),
        out.display(),
        output.numel(),
        config.reduced_steps,
        config.runs,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn evaluate(
    generated: &[PathBuf],
    reference: &[PathBuf],
    compare: &[PathBuf],
    csv: Option<&Path>,
) -> Result<()> {
    if generated.len() != reference.len() {
        return Err(CliError::Usage(format!(
            "{} generated volumes but {} references",
            generated.len(),
            reference.len()
        )));
    }
    if !compare.is_empty() && compare.len() != generated.len() {
        return Err(CliError::Usage(format!(
            "--compare needs {} volumes, got {}",
            generated.len(),
            compare.len()
        )));
    }

    /// Per-case scores of one generated/reference pair, in attenuation units.
    fn score(gen_path: &Path, ref_path: &Path) -> Result<(f64, f64, f64, f64)> {
        let g = Volume::load(gen_path)?;
        let r = Volume::load(ref_path)?;
        if g.extents != r.extents {
            return Err(CliError::Usage(format!(
                "{} and {} have different extents",
                gen_path.display(),
                ref_path.display()
            )));
        }
        let gv = g.to_f64();
        let rv = r.to_f64();
        let mae = metrics::mae(&gv, &rv)?;
        let psnr = metrics::psnr(&gv, &rv)?;
        let (ssim, _) =
            metrics::ms_ssim_volume(&gv, &rv, g.extents, voxdiff_core::diffusion::INTENSITY_RANGE)?;
        let ncc = metrics::ncc(&gv, &rv)?;
        Ok((mae, psnr, ssim, ncc))
    }

    let mut rows = String::from("case,mae,psnr,ms_ssim,ncc\n");
    let mut maes = Vec::new();
    for (g, r) in generated.iter().zip(reference) {
        let (mae, psnr, ssim, ncc) = score(g, r)?;
        println!(
            "evaluate: {} vs {}: mae={mae:.3} psnr={psnr:.3} ms_ssim={ssim:.4} ncc={ncc:.4}",
            g.display(),
            r.display()
        );
        let _ = writeln!(rows, "{},{mae},{psnr},{ssim},{ncc}", g.display());
        maes.push(mae);
    }
    if maes.len() > 1 {
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        let sd = (maes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / (maes.len() as f64 - 1.0))
            .sqrt();
        println!("evaluate: mae mean={mean:.3} sd={sd:.3} over {} cases", maes.len());
    }
    if !compare.is_empty() {
        let mut other = Vec::new();
        for (c, r) in compare.iter().zip(reference) {
            other.push(score(c, r)?.0);
        }
        let t = paired_t_test(&maes, &other)?;
        println!(
            "evaluate: paired t-test on mae: diff={:.4} t={:.4} df={} p={:.6}",
            t.mean_difference, t.t_statistic, t.degrees_of_freedom, t.p_value
        );
    }
    if let Some(path) = csv {
        write_atomic(path, |p| Ok(std::fs::write(p, &rows)?))?;
    }
    Ok(())
}
