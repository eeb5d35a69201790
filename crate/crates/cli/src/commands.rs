use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context};
use quept::calibrate::{CalibratedModel, StepRecord};
use quept::deploy::{configure, DeployableModel};
use quept::format::Container;
use quept::merge::token_divergence_report;
use quept::mixed::{allocate_dp, sensitivity_table, Budget};
use quept::model::{gen_calib, CalibSet, ToyModel};
use quept::tensor::mae;
use quept::{BitConfig, BitWidth, CalibConfig, MergePolicy, ModelDims, QuantSetup, Tensor};

use crate::ablation::{arms, run_arm};
use crate::args::*;
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const ARTIFACT_FILE: &str = "artifact.qept";
pub const LOG_FILE: &str = "calib_log.jsonl";

/// Dispatches one parsed command and returns the text to print.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::GenModel(a) => cmd_gen_model(&a),
        Command::GenCalib(a) => cmd_gen_calib(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Switch(a) => cmd_switch(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Allocate(a) => cmd_allocate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load_container(path: &Path) -> anyhow::Result<Container> {
    Container::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ToyModel<f32>> {
    Ok(ToyModel::from_container(&load_container(path)?)?)
}

fn load_calib(path: &Path) -> anyhow::Result<CalibSet<f32>> {
    Ok(CalibSet::from_container(&load_container(path)?)?)
}

fn load_artifact(path: &Path) -> anyhow::Result<CalibratedModel<f32>> {
    Ok(CalibratedModel::from_container(&load_container(path)?)?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_gen_model(a: &GenModelArgs) -> anyhow::Result<String> {
    let dims = ModelDims {
        blocks: a.blocks,
        hidden: a.hidden,
        heads: a.heads,
        tokens: a.tokens,
        mlp_ratio: a.mlp_ratio,
    };
    let model = ToyModel::<f32>::generate(dims, a.seed)?;
    write(&a.out, model.to_container()?.to_bytes())?;
    Ok(format!("wrote {} ({} blocks, d={})", a.out.display(), dims.blocks, dims.hidden))
}

pub fn cmd_gen_calib(a: &GenCalibArgs) -> anyhow::Result<String> {
    let set = gen_calib::<f32>(a.seed, a.n, a.tokens, a.hidden)?;
    write(&a.out, set.to_container()?.to_bytes())?;
    Ok(format!("wrote {} ({} sequences)", a.out.display(), a.n))
}

/// Resolves command-line options into a quantizer setup and optimizer config.
pub fn resolve_opts(o: &CalibOpts) -> anyhow::Result<(QuantSetup, CalibConfig)> {
    if let Some(BitList(bits)) = &o.bits {
        let mut bits = bits.clone();
        bits.sort_unstable();
        bits.dedup();
        ensure!(
            bits == o.tiers.bits(),
            "--bits {:?} does not match the tiers {}",
            bits.iter().map(|b| b.bits()).collect::<Vec<_>>(),
            o.tiers
        );
    }
    let setup = QuantSetup {
        partition: o.tiers.clone(),
        ranks: o.ranks,
        sharing: o.sharing,
        quantize_activations: !o.weight_only,
        act_percentile: o.act_percentile,
    };
    let default = MergePolicy::default();
    let merge = MergePolicy::new(o.tome_case, o.tome_p, o.tome_lambdas.unwrap_or(default.lambdas))?;
    let config = CalibConfig {
        steps: o.steps,
        lr_adapter: o.lr_adapter,
        lr_clip: o.lr_clip,
        batch_size: o.batch_size,
        seed: o.seed,
        merge: (!o.no_tome).then_some(merge),
        loss: o.loss,
        learn_clips: !o.freeze_clips,
    };
    config.validate()?;
    Ok((setup, config))
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> anyhow::Result<String> {
    let manifest = match &a.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            m.verify_inputs()?;
            m
        }
        None => {
            let (setup, config) = resolve_opts(&a.opts)?;
            let (model, calib) = (a.model.as_ref().unwrap(), a.calib.as_ref().unwrap());
            RunManifest::new(model, calib, setup, config)?
        }
    };
    let model = load_model(&manifest.inputs.model)?;
    let calib = load_calib(&manifest.inputs.calib)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let log_path = a.out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut io_err = None;
    let mut last: Option<StepRecord> = None;
    let cal = quept::calibrate_model(model, &calib, manifest.setup.clone(), &manifest.config, |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).expect("step record serializes");
            io_err = writeln!(log, "{line}").err();
        }
        if r.step + 1 == manifest.config.steps {
            log::info!("block {} done: losses L/M/H {:.5} {:.5} {:.5}", r.block, r.loss_l, r.loss_m, r.loss_h);
        }
        last = Some(*r);
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing calibration log");
    }
    log.flush()?;
    write(&a.out_dir.join(ARTIFACT_FILE), cal.to_container()?.to_bytes())?;
    write(&a.out_dir.join(MANIFEST_FILE), manifest.to_toml()?)?;

    let mut out = format!(
        "calibrated {} blocks over bits {} in {} optimizer steps\n",
        cal.model.blocks.len(),
        manifest.setup.partition,
        cal.optimizer_steps()
    );
    if let Some(r) = last {
        writeln!(out, "final losses L/M/H: {:.6} {:.6} {:.6}", r.loss_l, r.loss_m, r.loss_h)?;
    }
    write!(out, "wrote {}", a.out_dir.display())?;
    Ok(out)
}

pub fn cmd_switch(a: &SwitchArgs) -> anyhow::Result<String> {
    let cal = load_artifact(&a.artifact)?;
    let cfg = match (a.uniform, &a.config, a.full_precision) {
        (Some(b), None, false) => BitConfig::Uniform(BitWidth::new(b)?),
        (None, Some(path), false) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            BitConfig::from_toml(&text)?
        }
        (None, None, true) => BitConfig::FullPrecision,
        _ => bail!("choose exactly one of --uniform, --config, --full-precision"),
    };
    let (steps, writes) = (cal.optimizer_steps(), cal.store.write_count());
    let dep = configure(&cal, &cfg)?;
    let taken = cal.optimizer_steps() - steps;
    ensure!(cal.store.write_count() == writes, "configuration modified calibrated parameters");
    write(&a.out, dep.to_container()?.to_bytes())?;
    Ok(format!(
        "configured {} layers, average weight bits {:.3}; {taken} optimizer steps\nwrote {}",
        dep.layers.len(),
        dep.average_weight_bits(),
        a.out.display()
    ))
}

/// Per-block MAE of the deployable's chained outputs against the
/// full-precision chain, and the final quantized output.
pub fn block_losses(dep: &DeployableModel<f32>, x: &Tensor<f32>) -> anyhow::Result<(Vec<f64>, Tensor<f32>, Tensor<f32>)> {
    let (mut xq, mut xf) = (x.clone(), x.clone());
    let mut losses = Vec::with_capacity(dep.model.blocks.len());
    for i in 0..dep.model.blocks.len() {
        xq = dep.model.forward_block(i, &xq, dep)?;
        xf = dep.model.forward_block_fp(i, &xf)?;
        losses.push(mae(&xq, &xf)? as f64);
    }
    Ok((losses, xf, xq))
}

fn flatten(x: &Tensor<f32>) -> anyhow::Result<Tensor<f32>> {
    Ok(x.reshape(&[x.shape()[0] * x.shape()[1], x.shape()[2]])?)
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<String> {
    let dep = DeployableModel::<f32>::from_container(&load_container(&a.deployable)?)?;
    let data = load_calib(&a.data)?;
    dep.model.check_input(&data.data)?;
    let (losses, fp, q) = block_losses(&dep, &data.data)?;
    let report = token_divergence_report(&flatten(&fp)?, &flatten(&q)?)?;
    fs::create_dir_all(&a.out_dir)?;

    let end_to_end = *losses.last().unwrap();
    let ks: Vec<f64> = report.iter().map(|&(_, s)| s as f64).collect();
    let ks_mean = ks.iter().sum::<f64>() / ks.len() as f64;
    let ks_max = ks.first().copied().unwrap_or(0.0);

    let mut metrics = csv::Writer::from_path(a.out_dir.join("metrics.csv"))?;
    metrics.write_record(["metric", "value"])?;
    for (i, l) in losses.iter().enumerate() {
        metrics.write_record([format!("block{i}_mae"), format!("{l:.9}")])?;
    }
    metrics.write_record(["end_to_end_mae".to_string(), format!("{end_to_end:.9}")])?;
    metrics.write_record(["ks_mean".to_string(), format!("{ks_mean:.9}")])?;
    metrics.write_record(["ks_max".to_string(), format!("{ks_max:.9}")])?;
    metrics.flush()?;

    let mut tokens = csv::Writer::from_path(a.out_dir.join("token_ks.csv"))?;
    let t = dep.model.dims.tokens;
    tokens.write_record(["sequence", "token", "ks"])?;
    for (k, s) in &report {
        tokens.write_record([(k / t).to_string(), (k % t).to_string(), format!("{s:.9}")])?;
    }
    tokens.flush()?;

    let mut summary = format!(
        "average weight bits {:.3}\nend-to-end MAE vs full precision: {end_to_end:.6}\n",
        dep.average_weight_bits()
    );
    for (i, l) in losses.iter().enumerate() {
        writeln!(summary, "  block {i} output MAE: {l:.6}")?;
    }
    writeln!(summary, "token K-S statistic: mean {ks_mean:.4}, max {ks_max:.4}")?;
    let top: Vec<String> = report.iter().take(5).map(|(k, s)| format!("{}:{} ({s:.3})", k / t, k % t)).collect();
    write!(summary, "most divergent tokens (sequence:token): {}", top.join(", "))?;
    write(&a.out_dir.join("summary.txt"), format!("{summary}\n"))?;
    Ok(summary)
}

fn bit_label(b: BitWidth, setup: &QuantSetup) -> String {
    if setup.quantize_activations {
        format!("W{b}A{b}")
    } else {
        format!("W{b}")
    }
}

pub fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<String> {
    let (setup, config) = resolve_opts(&a.opts)?;
    let model = load_model(&a.model)?;
    let calib = load_calib(&a.calib)?;
    let bits = setup.partition.bits();
    let mut table = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut header = vec!["arm".to_string()];
    header.extend(bits.iter().map(|&b| bit_label(b, &setup)));
    table.write_record(&header)?;
    let mut out = header.join("\t");
    for arm in arms(a.study, &setup, &config) {
        let r = run_arm(&model, &calib, &arm)?;
        let mut row = vec![r.name.clone()];
        row.extend(r.mae.iter().map(|(_, m)| format!("{m:.6}")));
        table.write_record(&row)?;
        write!(out, "\n{}", row.join("\t"))?;
    }
    table.flush()?;
    Ok(out)
}

pub fn cmd_allocate(a: &AllocateArgs) -> anyhow::Result<String> {
    let cal = load_artifact(&a.artifact)?;
    let calib = load_calib(&a.calib)?;
    let budget = Budget::new(a.avg_bits, cal.layers.len())?;
    let table = sensitivity_table(&cal, &calib.data)?;
    let alloc = allocate_dp(&table, &budget)?;
    let file = fs::File::create(&a.sensitivity).with_context(|| format!("writing {}", a.sensitivity.display()))?;
    table.write_csv(file)?;
    let cfg = alloc.to_bit_config();
    configure(&cal, &cfg)?;
    write(&a.out, cfg.to_toml())?;
    let bits: Vec<String> = alloc.bits.iter().map(|b| b.to_string()).collect();
    Ok(format!(
        "budget {} total bits over {} layers; achieved average {:.3}\nbits per layer: {}\ntotal sensitivity {:.6}\nwrote {} and {}",
        budget.total_bits(),
        alloc.bits.len(),
        alloc.average(),
        bits.join(","),
        alloc.objective,
        a.out.display(),
        a.sensitivity.display()
    ))
}

pub fn cmd_report(a: &ReportArgs) -> anyhow::Result<String> {
    let cal = load_artifact(&a.artifact)?;
    let calib = load_calib(&a.calib)?;
    let mut table = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    table.write_record(["bits", "end_to_end_mae", "ks_mean", "ks_max"])?;
    let mut out = format!(
        "{} blocks, tiers {}, ranks {}, sharing {}\n",
        cal.model.blocks.len(),
        cal.setup.partition,
        cal.setup.ranks,
        cal.setup.sharing
    );
    for b in cal.bits() {
        let dep = configure(&cal, &BitConfig::Uniform(b))?;
        let (losses, fp, q) = block_losses(&dep, &calib.data)?;
        let report = token_divergence_report(&flatten(&fp)?, &flatten(&q)?)?;
        let ks_mean = report.iter().map(|&(_, s)| s as f64).sum::<f64>() / report.len() as f64;
        let ks_max = report[0].1 as f64;
        let label = bit_label(b, &cal.setup);
        let end = *losses.last().unwrap();
        table.write_record([label.clone(), format!("{end:.9}"), format!("{ks_mean:.9}"), format!("{ks_max:.9}")])?;
        writeln!(out, "{label}: MAE {end:.6}, K-S mean {ks_mean:.4}, max {ks_max:.4}")?;
    }
    table.flush()?;
    write!(out, "wrote {}", a.out.display())?;
    Ok(out)
}
