use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mla_core::attention::{AttentionConfig, AttentionLayer, ScorePath};
use mla_core::conversion::{convert_model, ConversionSpec, Placement, Strategy};
use mla_core::memory::{reduction_ratio, sweep, with_placement, ReductionBasis, SweepConfig, SweepModel, SweepRow};
use mla_core::model::{CheckpointContainer, Model, ModelSpec, TokenId, BOS, FIRST_CONTENT};
use mla_core::training::{
    self, evaluate, finite_diff_check, read_examples, write_examples, Freeze, MetricRow, Optimizer,
    SyntheticTask, TaskKind, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{
    CmdResult, ConvertArgs, DatasetArgs, EvalArgs, Failure, FinetuneArgs, FreezeArg, GradcheckArgs,
    InitArgs, InspectArgs, MemSweepArgs, OptimizerArg, PlacementArg, PresetArg, StrategyArg, TaskArg,
    TaskArgs, VariantArg, VerifyArgs,
};

pub(crate) struct Context {
    pub seed: u64,
    pub quiet: bool,
    pub out: Option<PathBuf>,
}

impl Context {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            // A closed pipe is not worth a panic.
            let _ = writeln!(std::io::stdout().lock(), "{}", line.as_ref());
        }
    }

    /// Writes machine-readable lines to `--out` when given.
    fn emit(&self, lines: impl IntoIterator<Item = String>) -> CmdResult {
        if let Some(p) = &self.out {
            let mut w = BufWriter::new(File::create(p)?);
            for l in lines {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn placement(p: PlacementArg) -> Placement {
    match p {
        PlacementArg::Full => Placement::Full,
        PlacementArg::Dso => Placement::Dso,
    }
}

fn task_from(args: &TaskArgs, vocab: usize) -> Result<SyntheticTask, Failure> {
    let t = SyntheticTask {
        kind: match args.task {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Reverse => TaskKind::Reverse,
        },
        vocab_size: args.task_vocab.unwrap_or(vocab),
        min_len: args.min_len,
        max_len: args.max_len,
        sample_count: args.samples,
        seed: args.task_seed,
    };
    t.validate()?;
    Ok(t)
}

fn load_container(path: &Path) -> Result<CheckpointContainer, Failure> {
    CheckpointContainer::load(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

pub(crate) fn init(ctx: &Context, a: InitArgs) -> CmdResult {
    let spec = ModelSpec::mha(
        a.d_model,
        a.n_heads,
        a.encoder_layers,
        a.decoder_layers,
        a.d_ff,
        a.vocab_size,
        a.max_len,
        a.max_len,
    )?;
    let model = Model::random(spec, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
    let mut c = model.to_container(None);
    c.metadata.insert("init_seed".into(), ctx.seed.to_string());
    c.save(&a.output)?;
    ctx.say(format!(
        "seed {}: wrote {} ({} parameters)",
        ctx.seed,
        a.output.display(),
        model.parameter_count()
    ));
    Ok(())
}

pub(crate) fn dataset(ctx: &Context, a: DatasetArgs) -> CmdResult {
    let task = task_from(&a.task, a.task.task_vocab.unwrap_or(64))?;
    let examples = task.generate()?;
    write_examples(&a.output, &examples)?;
    ctx.say(format!(
        "task seed {}: wrote {} {} examples to {}",
        task.seed,
        examples.len(),
        task.kind,
        a.output.display()
    ));
    Ok(())
}

pub(crate) fn convert(ctx: &Context, a: ConvertArgs) -> CmdResult {
    let strategy = match a.strategy {
        StrategyArg::FullCompression => Strategy::FullCompression,
        StrategyArg::Uniform => Strategy::Uniform,
        StrategyArg::TwoNorm => Strategy::TwoNorm,
    };
    let r = a
        .preserve_per_head
        .unwrap_or(if strategy == Strategy::FullCompression { 0 } else { 1 });
    if strategy == Strategy::TwoNorm && a.calib.is_none() {
        return Err(Failure::usage("calibration required: --strategy 2norm needs --calib PATH"));
    }
    if strategy == Strategy::FullCompression && r != 0 {
        return Err(Failure::usage("full-compression preserves no dimensions; drop --preserve-per-head"));
    }
    if strategy != Strategy::FullCompression && r == 0 {
        return Err(Failure::usage("--preserve-per-head must be at least 1 for this strategy"));
    }
    let spec = ConversionSpec::new(strategy, a.latent_dim, r, placement(a.placement));

    let ckpt = load_container(&a.input)?;
    spec.validate(ckpt.model.d_model, ckpt.model.n_heads)?;
    let calib = match &a.calib {
        Some(p) => Some(read_examples(p)?),
        None => None,
    };
    let (mut out, reports) = convert_model(&ckpt, &spec, calib.as_deref())?;
    out.metadata.insert("convert_seed".into(), ctx.seed.to_string());
    out.save(&a.output)?;

    let d = ckpt.model.d_model;
    let n_p = 2 * r * ckpt.model.n_heads;
    ctx.say(format!(
        "converted {} -> {} ({}, {}, d_latent={}, r_per_head={}, seed {})",
        a.input.display(),
        a.output.display(),
        spec.placement,
        spec.strategy,
        spec.d_latent,
        r,
        ctx.seed
    ));
    for basis in [ReductionBasis::KeyOnly, ReductionBasis::KeyValue] {
        let text = match reduction_ratio(basis, d, a.latent_dim, n_p) {
            Ok(red) => red.to_string(),
            Err(_) => "n/a (not a compression on this basis)".to_string(),
        };
        ctx.say(format!("kv cache reduction [{basis}]: {text}"));
    }
    for rep in &reports {
        ctx.say(format!("  {}: svd relative error {:.6e}", rep.site, rep.relative_error));
    }
    ctx.emit(reports.iter().map(|r| {
        json!({
            "layer": r.site.to_string(),
            "relative_error": r.relative_error,
            "selection": r.selection.per_head(),
        })
        .to_string()
    }))
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    let lo = if vocab > FIRST_CONTENT as usize { FIRST_CONTENT } else { 0 };
    (0..len).map(|_| rng.random_range(lo..vocab as TokenId)).collect()
}

/// Largest deviation between cached step-by-step logits and one causal pass.
fn incremental_deviation(m: &Model, source: &[TokenId], tokens: &[TokenId]) -> mla_core::Result<f64> {
    let enc = m.encode(source)?;
    let batch = m.decode_full(&enc, tokens)?;
    let mut st = m.new_decode_state(ScorePath::Absorbed);
    let mut worst = 0.0f64;
    for (pos, &t) in tokens.iter().enumerate() {
        let step = m.decode_step(t, pos, &enc, &mut st)?;
        let row = mla_core::Matrix::row_vector(batch.row(pos).to_vec());
        worst = worst.max(step.max_abs_diff(&row));
    }
    Ok(worst)
}

pub(crate) fn verify(ctx: &Context, a: VerifyArgs) -> CmdResult {
    if !(a.tolerance >= 0.0) {
        return Err(Failure::usage("--tolerance must be non-negative"));
    }
    if a.trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let orig = Model::from_container(&load_container(&a.original)?)?;
    let conv = Model::from_container(&load_container(&a.converted)?)?;
    let (s, t) = (&orig.spec, &conv.spec);
    if (s.d_model, s.vocab_size, s.max_source_len, s.max_target_len)
        != (t.d_model, t.vocab_size, t.max_source_len, t.max_target_len)
    {
        return Err(Failure::usage("checkpoints have incompatible model shapes"));
    }

    let mut lines = Vec::with_capacity(a.trials);
    let (mut worst_logit, mut worst_step) = (0.0f64, 0.0f64);
    let mut worst_seed = ctx.seed;
    let mut worst_any = -1.0f64;
    for trial in 0..a.trials {
        let seed = ctx.seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src_len = rng.random_range(1..=s.max_source_len.min(16));
        let tgt_len = rng.random_range(1..=s.max_target_len.min(16));
        let source = random_tokens(&mut rng, src_len, s.vocab_size);
        let mut tokens = vec![BOS];
        tokens.extend(random_tokens(&mut rng, tgt_len - 1, s.vocab_size));

        let logit = orig
            .forward_logits(&source, &tokens)?
            .max_abs_diff(&conv.forward_logits(&source, &tokens)?);
        let step = incremental_deviation(&orig, &source, &tokens)?
            .max(incremental_deviation(&conv, &source, &tokens)?);
        worst_logit = worst_logit.max(logit);
        worst_step = worst_step.max(step);
        if logit.max(step) > worst_any {
            worst_any = logit.max(step);
            worst_seed = seed;
        }
        lines.push(json!({"trial": trial, "seed": seed, "max_logit_dev": logit, "max_step_dev": step}).to_string());
    }
    ctx.emit(lines)?;
    ctx.say(format!(
        "seed {}: {} trials, max logit deviation {:.3e}, max incremental-vs-batch deviation {:.3e}, tolerance {:.1e}",
        ctx.seed, a.trials, worst_logit, worst_step, a.tolerance
    ));
    if worst_logit > a.tolerance || worst_step > a.tolerance {
        return Err(Failure::metric(format!(
            "deviation exceeds tolerance {:.1e} (worst input seed {worst_seed})",
            a.tolerance
        )));
    }
    Ok(())
}

fn train_config(ctx: &Context, a: &FinetuneArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: ctx.seed,
        gradient_clip: (a.clip > 0.0).then_some(a.clip),
    }
}

pub(crate) fn finetune(ctx: &Context, a: FinetuneArgs) -> CmdResult {
    let cfg = train_config(ctx, &a);
    cfg.validate()?;
    let ckpt = load_container(&a.input)?;
    let model = Model::from_container(&ckpt)?;
    let task = task_from(&a.task, model.spec.vocab_size)?;
    task.check_model(&model.spec)?;
    let is_dso = ckpt
        .conversion
        .as_ref()
        .is_some_and(|c| c.placement == Placement::Dso);
    let freeze = match a.freeze {
        FreezeArg::Dso => Freeze::dso(&model.spec),
        FreezeArg::Auto if is_dso => Freeze::dso(&model.spec),
        _ => Freeze::none(),
    };

    let out = training::finetune(&model, &task, &cfg, &freeze)?;
    let mut c = out.model.to_container(ckpt.conversion.clone());
    c.metadata = ckpt.metadata.clone();
    c.metadata.insert("train_seed".into(), ctx.seed.to_string());
    c.metadata.insert("task_seed".into(), task.seed.to_string());
    c.save(&a.output)?;

    ctx.emit(std::iter::once(MetricRow::CSV_HEADER.to_string()).chain(out.trace.iter().map(MetricRow::to_csv)))?;
    ctx.say(format!(
        "seed {} (task seed {}): {} epochs, {} steps, freeze {}",
        ctx.seed,
        task.seed,
        cfg.epochs,
        out.steps,
        if freeze.is_empty() { "none" } else { "dso" }
    ));
    for r in &out.trace {
        ctx.say(format!(
            "  epoch {} {:<7} loss {:.4} token accuracy {:.4}",
            r.epoch, r.split, r.loss, r.token_accuracy
        ));
    }
    Ok(())
}

pub(crate) fn eval(ctx: &Context, a: EvalArgs) -> CmdResult {
    let model = Model::from_container(&load_container(&a.input)?)?;
    let task = task_from(&a.task, model.spec.vocab_size)?;
    task.check_model(&model.spec)?;
    let (_, held) = task.split()?;
    let r = evaluate(&model, &held)?;
    ctx.emit([json!({
        "split": "heldout",
        "task_seed": task.seed,
        "loss": r.loss,
        "token_accuracy": r.token_accuracy,
        "labels": r.label_count,
    })
    .to_string()])?;
    ctx.say(format!(
        "task seed {}: held-out loss {:.4}, token accuracy {:.4} over {} tokens",
        task.seed, r.loss, r.token_accuracy, r.label_count
    ));
    if let Some(min) = a.min_accuracy {
        if r.token_accuracy < min {
            return Err(Failure::metric(format!(
                "token accuracy {:.4} below required {min}",
                r.token_accuracy
            )));
        }
    }
    Ok(())
}

pub(crate) fn mem_sweep(ctx: &Context, a: MemSweepArgs) -> CmdResult {
    if a.batches.is_empty() || a.lengths.is_empty() {
        return Err(Failure::usage("--batches and --lengths must be non-empty"));
    }
    let base = match a.preset {
        PresetArg::WhisperSmall => ModelSpec::whisper_small(),
        PresetArg::Toy => ModelSpec::toy(),
    };
    let cfg = if a.preserve_per_head == 0 {
        AttentionConfig::mla_full(base.d_model, base.n_heads, a.latent_dim)?
    } else {
        AttentionConfig::mla_preserving(base.d_model, base.n_heads, a.latent_dim, a.preserve_per_head)?
    };
    let pl = placement(a.placement);
    let models = [
        SweepModel {
            name: "mha".into(),
            placement: "none".into(),
            spec: base,
        },
        SweepModel {
            name: "mla".into(),
            placement: pl.to_string(),
            spec: with_placement(&base, pl, cfg)?,
        },
    ];
    let rows = sweep(
        &models,
        &SweepConfig {
            batches: a.batches.clone(),
            lengths: a.lengths.clone(),
            source_len: a.source_len,
            bytes_per_entry: a.bytes_per_entry,
            budget_bytes: a.budget,
        },
    )?;
    let csv: Vec<String> = std::iter::once(SweepRow::CSV_HEADER.to_string())
        .chain(rows.iter().map(SweepRow::to_csv))
        .collect();
    if ctx.out.is_some() {
        ctx.emit(csv)?;
        let oom: Vec<String> = rows
            .iter()
            .filter(|r| r.oom)
            .map(|r| format!("{}@{}x{}", r.model, r.batch, r.seq_len))
            .collect();
        ctx.say(format!(
            "{} rows; per-token entries mha {} vs mla {}; OOM: {}",
            rows.len(),
            2 * base.d_model,
            cfg.cache_entries_per_token(),
            if oom.is_empty() { "none".to_string() } else { oom.join(" ") }
        ));
    } else {
        let mut w = std::io::stdout().lock();
        for l in csv {
            if writeln!(w, "{l}").is_err() {
                break;
            }
        }
    }
    Ok(())
}

fn fresh_model(variant: VariantArg, seed: u64) -> mla_core::Result<Model> {
    let mut spec = ModelSpec::toy();
    let cfg = match variant {
        VariantArg::Mha => spec.encoder_self,
        VariantArg::MlaFull => AttentionConfig::mla_full(spec.d_model, spec.n_heads, 8)?,
        VariantArg::MlaPreserving => AttentionConfig::mla_preserving(spec.d_model, spec.n_heads, 8, 1)?,
    };
    spec.encoder_self = cfg;
    spec.decoder_self = cfg;
    spec.cross = cfg;
    Model::random(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn gradcheck(ctx: &Context, a: GradcheckArgs) -> CmdResult {
    if a.samples == 0 || a.batch == 0 {
        return Err(Failure::usage("--samples and --batch must be at least 1"));
    }
    let model = match &a.input {
        Some(p) => Model::from_container(&load_container(p)?)?,
        None => fresh_model(a.variant, ctx.seed)?,
    };
    let s = &model.spec;
    let task = SyntheticTask {
        kind: TaskKind::Copy,
        vocab_size: s.vocab_size.min(64),
        min_len: 1,
        max_len: 16.min(s.max_source_len).min(s.max_target_len - 1).max(1),
        sample_count: a.batch.max(2),
        seed: ctx.seed,
    };
    let batch: Vec<_> = task.generate()?.into_iter().take(a.batch).collect();
    let report = finite_diff_check(&model, &batch, a.samples, ctx.seed)?;
    ctx.emit(report.samples.iter().map(|x| serde_json::to_string(x).expect("serializable")))?;
    ctx.say(format!(
        "seed {}: {} coordinates, max relative error {:.3e}, {} flagged",
        ctx.seed,
        report.samples.len(),
        report.max_relative_error,
        report.flagged().len()
    ));
    if !report.passed() {
        for x in report.flagged() {
            ctx.say(format!(
                "  {}[{},{}]: analytic {:.6e} numeric {:.6e}",
                x.tensor, x.row, x.col, x.analytic, x.numeric
            ));
        }
        return Err(Failure::metric("gradient check flagged coordinates"));
    }
    Ok(())
}

pub(crate) fn inspect(ctx: &Context, a: InspectArgs) -> CmdResult {
    let c = load_container(&a.input)?;
    let model = Model::from_container(&c)?;
    let layers: Vec<_> = model
        .spec
        .layer_sites()
        .into_iter()
        .map(|ls| {
            let layer = model.attention(ls).expect("layer exists");
            let mut v = json!({"layer": ls.to_string(), "site": ls.site, "variant": layer.variant().to_string()});
            if let AttentionLayer::Mla(w) = layer {
                v["d_latent"] = json!(w.d_latent());
                v["selection"] = json!(w.selection().per_head());
            }
            v
        })
        .collect();
    let doc = json!({
        "format_version": mla_core::model::FORMAT_VERSION,
        "model": c.model,
        "conversion": c.conversion,
        "metadata": c.metadata,
        "tensor_count": c.tensors().len(),
        "parameter_count": model.parameter_count(),
        "layers": layers,
    });
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    ctx.emit([serde_json::to_string(&doc).expect("serializable")])?;
    ctx.say(text);
    Ok(())
}
