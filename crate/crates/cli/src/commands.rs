use std::fmt;
use std::path::Path;

use kprune::data::Dataset;
use kprune::eval::{all_logits, evaluate};
use kprune::knowledge::{measure, Criterion};
use kprune::kpms::score as score_units;
use kprune::kpp::{
    fmt_sig9, prune_model, tau_from_compression, tau_from_keep, Precision, PruneOptions,
    PruneReport,
};
use kprune::model::flops::{
    flops_per_head, flops_per_neuron, model_prunable_flops, total_model_flops,
};
use kprune::model::{load_container, save_container, EncoderModel, MaskState};
use kprune::synth::{add_noise_units, labeled_dataset, plant_redundancy, random_model, toy_config};

use crate::{
    Budget, EvalArgs, FlopsArgs, Hyper, Inputs, PruneArgs, ScoreArgs, SweepArgs, SynthArgs,
};

pub enum CliError {
    /// Flags that parse but make no sense together.
    Usage(String),
    Core(kprune::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_user_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<kprune::Error> for CliError {
    fn from(e: kprune::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| {
        CliError::Core(kprune::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load(inputs: &Inputs) -> Result<(EncoderModel, Dataset)> {
    let model = load_container(&inputs.model)?;
    let mut dataset = Dataset::load_jsonl(&inputs.samples, &model.config)?;
    if let Some(max) = inputs.max_samples {
        if max == 0 {
            return Err(CliError::Usage("--max-samples must be at least 1".into()));
        }
        dataset = dataset.subsample(max, inputs.seed);
    }
    Ok((model, dataset))
}

fn tau(model: &EncoderModel, budget: &Budget) -> Result<u64> {
    let t = match (budget.keep_flops, budget.target_compression) {
        (Some(keep), None) => tau_from_keep(model, keep)?,
        (None, Some(rate)) => tau_from_compression(model, rate)?,
        _ => unreachable!("clap enforces exactly one budget flag"),
    };
    Ok(t)
}

fn options(h: &Hyper) -> PruneOptions {
    PruneOptions {
        gamma: h.gamma,
        lambda: h.lambda,
        mu: h.mu,
        criterion: h.criterion.into(),
        one_shot: h.one_shot,
        kpms_global: h.kpms_global,
        precision: if h.f64 {
            Precision::F64
        } else {
            Precision::F32
        },
    }
}

fn summary_line(report: &PruneReport) -> String {
    let s = &report.summary;
    format!(
        "compression={} flops={}/{} sublayers={}",
        fmt_sig9(s.compression_rate),
        s.flops_after,
        s.flops_before,
        s.sublayers_pruned
    )
}

pub fn prune(args: PruneArgs) -> Result<()> {
    let (model, dataset) = load(&args.inputs)?;
    let tau = tau(&model, &args.budget)?;
    let (pruned, report) = prune_model(&model, &dataset, tau, &options(&args.hyper))?;
    for it in &report.iterations {
        log::info!(
            "sublayer {} ({}): nu*={} residual {} -> {} ({:?})",
            it.sublayer,
            it.kind,
            it.nu_star,
            it.residual_before,
            it.residual_after,
            it.reconstruction
        );
    }
    save_container(&pruned, &args.out)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("json"));
    write_file(&report_path, report.to_json().as_bytes())?;
    println!("{}", summary_line(&report));
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (model, dataset) = load(&args.inputs)?;
    let reference = match &args.reference {
        Some(path) => Some(all_logits(&load_container(path)?, &dataset)?),
        None => None,
    };
    let e = evaluate(&model, &dataset, reference.as_deref())?;
    let mut line = format!(
        "accuracy={} mean_loss={}",
        fmt_sig9(e.accuracy),
        fmt_sig9(e.mean_loss)
    );
    if let Some(kl) = e.mean_kl {
        line += &format!(" mean_kl={}", fmt_sig9(kl));
    }
    println!("{line}");
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let (model, dataset) = load(&args.inputs)?;
    let held_out = match &args.eval_samples {
        Some(path) => Dataset::load_jsonl(path, &model.config)?,
        None => dataset.clone(),
    };
    let teacher = all_logits(&model, &held_out)?;
    let tau = tau(&model, &args.budget)?;
    let base = options(&args.hyper);

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Core(kprune::Error::Numerical(format!("csv: {e}")));
    w.write_record(["param", "value", "compression", "accuracy", "mean_kl"])
        .map_err(csv_err)?;
    for &value in &args.values {
        let mut opts = base.clone();
        match args.param {
            crate::Param::Gamma => opts.gamma = value,
            crate::Param::Lambda => opts.lambda = value,
            crate::Param::Mu => opts.mu = value,
        }
        let (pruned, report) = prune_model(&model, &dataset, tau, &opts)?;
        let e = evaluate(&pruned, &held_out, Some(&teacher))?;
        w.write_record([
            args.param.name().to_string(),
            fmt_sig9(value),
            fmt_sig9(report.summary.compression_rate),
            fmt_sig9(e.accuracy),
            fmt_sig9(e.mean_kl.unwrap_or(f64::NAN)),
        ])
        .map_err(csv_err)?;
        println!(
            "{}={} {}",
            args.param.name(),
            fmt_sig9(value),
            summary_line(&report)
        );
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Core(kprune::Error::Numerical(format!("csv: {e}"))))?;
    write_file(&args.out, &bytes)
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let model = load_container(&args.model)?;
    let (f_head, f_neuron) = (
        flops_per_head(&model.config),
        flops_per_neuron(&model.config),
    );
    println!(
        "seq_len={} F_head={f_head} F_neuron={f_neuron}",
        model.config.avg_seq_len
    );
    for (l, (h, n)) in model
        .heads_per_layer()
        .into_iter()
        .zip(model.neurons_per_layer())
        .enumerate()
    {
        println!(
            "layer {l}: heads={h} neurons={n} mha={} ffn={}",
            h as u64 * f_head,
            n as u64 * f_neuron
        );
    }
    println!("prunable={}", model_prunable_flops(&model));
    println!("total={}", total_model_flops(&model));
    Ok(())
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let (model, dataset) = load(&args.inputs)?;
    let opts = options(&args.hyper);
    let teacher = all_logits(&model, &dataset)?;
    let masks = MaskState::ones(&model);
    let m = measure(
        &model,
        &masks,
        &dataset,
        &teacher,
        opts.gamma,
        opts.criterion,
        None,
    )?;
    let lambda = match opts.criterion {
        Criterion::KPruning => opts.lambda,
        Criterion::MagnitudeGradient => 0.0,
    };
    let scores = score_units(
        &m.table,
        lambda,
        opts.mu,
        flops_per_head(&model.config),
        flops_per_neuron(&model.config),
    )?;
    let mut out = Vec::new();
    m.table.write_csv(&scores, &mut out)?;
    write_file(&args.out, &out)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    if args.layers == 0 || args.heads == 0 || args.head_dim == 0 || args.neurons == 0 {
        return Err(CliError::Usage(
            "model dimensions must be at least 1".into(),
        ));
    }
    if args.classes < 2 {
        return Err(CliError::Usage("--classes must be at least 2".into()));
    }
    if args.count == 0 || args.min_len == 0 || args.min_len > args.max_len {
        return Err(CliError::Usage(
            "need --count >= 1 and 1 <= --min-len <= --max-len".into(),
        ));
    }
    let config = toy_config(
        args.layers,
        args.heads,
        args.head_dim,
        args.neurons,
        args.classes,
    );
    if args.max_len > config.max_seq_len {
        return Err(CliError::Usage(format!(
            "--max-len may not exceed {}",
            config.max_seq_len
        )));
    }
    let mut model = random_model(&config, args.seed);
    if let Some(share) = args.plant {
        if !(0.0..=1.0).contains(&share) {
            return Err(CliError::Usage("--plant must be in [0, 1]".into()));
        }
        model = plant_redundancy(&model, share);
    }
    if args.noise_heads > 0 || args.noise_neurons > 0 {
        model = add_noise_units(
            &model,
            args.noise_heads,
            args.noise_neurons,
            args.noise_std,
            args.seed.wrapping_add(1),
        );
    }
    let samples = labeled_dataset(&model, args.count, args.min_len, args.max_len, args.seed)?;
    save_container(&model, &args.out)?;
    samples.write_jsonl(&args.samples_out)?;
    println!(
        "wrote {} ({} prunable FLOPs) and {} samples to {}",
        args.out.display(),
        model_prunable_flops(&model),
        samples.len(),
        args.samples_out.display()
    );
    Ok(())
}
