use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use serde_json::json;
use subprobe_core::autodiff::RngState;
use subprobe_core::checkpoint::Checkpoint;
use subprobe_core::data::{generate_corpus, read_conll2003, read_conllu, write_conll2003, write_conllu, Corpus, SyntheticGrammar, Vocab};
use subprobe_core::encoder::{encoder_checkpoint, encoder_manifest, read_encoder_checkpoint, Encoder, PretrainConfig};
use subprobe_core::hard_concrete::{mask_checkpoint, read_mask_checkpoint, Granularity};
use subprobe_core::harness::{
    bar_chart_svg, lambda_sweep, layer_sparsity, line_chart_svg, matched_comparisons, pareto_sweep, prepare_base,
    prepare_condition, run_probe, select_lambda_max, streams, write_results_csv, write_rows_csv, write_sparsity_csv,
    write_step_log_csv, Condition, ExperimentConfig, LayerSparsity, RunResult, Series, Task, TaskData, LAMBDA_LADDER,
};
use subprobe_core::heads::{probe_checkpoint, ProbeMode, MLP1_RANK_LADDER};

use crate::config::Resolver;
use crate::{AnalyzeArgs, Common, DataArgs, GenDataArgs, PretrainArgs, ProbeArgs, SweepArgs, SweepKind, TrainArgs, UsageError};

const DEFAULT_SENTENCES: usize = 10_000;

fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn resolver(common: &Common) -> Result<(Resolver, u64)> {
    let mut r = Resolver::new(common.config.as_deref())?;
    let seed = r.get("seed", common.seed, 0)?;
    Ok((r, seed))
}

fn list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| UsageError(format!("{what} {s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(UsageError(format!("empty {what} list")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut r, seed) = resolver(&a.common)?;
    let n = r.get("n", a.n, DEFAULT_SENTENCES)?;
    r.finish()?;
    if n == 0 {
        return Err(UsageError("--n must be positive".into()).into());
    }
    let grammar = match &a.grammar {
        Some(p) => {
            require_file(p, "grammar")?;
            SyntheticGrammar::load(p)?
        }
        None => SyntheticGrammar::shipped(),
    };
    let corpus = generate_corpus(&grammar, n, &mut RngState::with_stream(seed, streams::DATA))?;
    create_dir(&a.out)?;
    write_conllu(&corpus, a.out.join("corpus.conllu"))?;
    write_conll2003(&corpus, a.out.join("corpus.conll2003"))?;
    println!("wrote {n} sentences to {}", a.out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (mut r, seed) = resolver(&a.common)?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        epochs: r.get("epochs", a.epochs, d.epochs)?,
        lr: r.get("lr", a.lr, d.lr)?,
        batch_size: r.get("batch-size", a.batch_size, d.batch_size)?,
        mask_prob: r.get("mask-prob", a.mask_prob, d.mask_prob)?,
    };
    r.finish()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 || !(cfg.mask_prob > 0.0 && cfg.mask_prob < 1.0) {
        return Err(UsageError("epochs and batch size must be positive, lr positive, mask-prob in (0, 1)".into()).into());
    }
    require_file(&a.corpus, "corpus")?;
    r.record("corpus", a.corpus.display());
    let corpus = read_conllu(&a.corpus)?;
    let base = prepare_base(&corpus, seed, &cfg)?;
    let report = base.report.as_ref().expect("pretraining report");

    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    encoder_checkpoint(&base.encoder, base.vocab.tokens()).write(&a.out)?;
    write_text(&sibling(&a.out, ".manifest.json"), &(encoder_manifest(&base.encoder) + "\n"))?;

    let mut log = String::from("epoch,train_loss,dev_loss,dev_accuracy,unigram_accuracy\n");
    log += &format!("0,,{},,\n", report.initial_dev_loss);
    let last = report.epoch_train_loss.len();
    for (i, l) in report.epoch_train_loss.iter().enumerate() {
        if i + 1 == last {
            log += &format!("{},{l},{},{},{}\n", i + 1, report.final_dev_loss, report.dev_accuracy, report.unigram_accuracy);
        } else {
            log += &format!("{},{l},,,\n", i + 1);
        }
    }
    write_text(&sibling(&a.out, ".log.csv"), &log)?;
    write_json(&sibling(&a.out, ".json"), &json!({ "settings": r.effective, "report": report }))?;
    println!(
        "held-out MLM accuracy {:.4} (unigram baseline {:.4}); wrote {}",
        report.dev_accuracy,
        report.unigram_accuracy,
        a.out.display()
    );
    Ok(())
}

/// Loaded corpus, vocabulary and pre-trained encoder for one task.
struct Loaded {
    data: TaskData,
    encoder: Encoder,
    tokens: Vec<String>,
}

fn load(d: &DataArgs, r: &mut Resolver) -> Result<Loaded> {
    let task = r.optional("task", d.task)?.ok_or_else(|| UsageError("--task is required".into()))?;
    require_file(&d.corpus, "corpus")?;
    require_file(&d.ckpt, "checkpoint")?;
    r.record("corpus", d.corpus.display());
    r.record("ckpt", d.ckpt.display());
    let mut corpus: Corpus = read_conllu(&d.corpus)?;
    if task == Task::Ner {
        let ner = d.ner.clone().unwrap_or_else(|| d.corpus.with_extension("conll2003"));
        require_file(&ner, "NER file")?;
        r.record("ner", ner.display());
        corpus.merge_ner(&read_conll2003(&ner)?)?;
    }
    let (encoder, tokens) = read_encoder_checkpoint(&Checkpoint::read(&d.ckpt)?)?;
    let vocab = Vocab::from_tokens(tokens.iter().map(String::as_str))?;
    Ok(Loaded { data: TaskData::new(task, &corpus, &vocab)?, encoder, tokens })
}

fn train_settings(c: &mut ExperimentConfig, t: &TrainArgs, r: &mut Resolver) -> Result<(), UsageError> {
    c.lambda_max = r.get("lambda-max", t.lambda_max, c.lambda_max)?;
    c.epochs = r.get("epochs", t.epochs, c.epochs)?;
    c.mask_lr = r.get("mask-lr", t.mask_lr, c.mask_lr)?;
    c.other_lr = r.get("other-lr", t.other_lr, c.other_lr)?;
    c.batch_size = r.get("batch-size", t.batch_size, c.batch_size)?;
    c.eval_split = r.get("eval-split", t.eval_split, c.eval_split)?;
    Ok(())
}

fn sparsity_files(dir: &Path, s: &LayerSparsity, title: &str) -> Result<()> {
    write_sparsity_csv(&dir.join("sparsity.csv"), s)?;
    let layers: Vec<String> = (0..s.all.len()).map(|l| format!("layer {l}")).collect();
    let series = [("all matrices".to_string(), s.all.clone()), ("attention only".to_string(), s.attention.clone())];
    write_text(&dir.join("sparsity.svg"), &bar_chart_svg(title, "layer", "fraction of weights kept", &layers, &series))
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let (mut r, seed) = resolver(&a.common)?;
    let loaded = load(&a.data, &mut r)?;
    let task = loaded.data.task;
    let condition = r.get("condition", a.condition, Condition::Pretrained)?;
    let mode = r.optional("mode", a.mode)?.ok_or_else(|| UsageError("--mode is required".into()))?;
    let mut c = ExperimentConfig::new(task, condition, mode, seed);
    let granularity = r.optional("granularity", a.granularity)?;
    let rank = r.optional("rank", a.rank)?;
    match mode {
        ProbeMode::Subnetwork if rank.is_some() => return Err(UsageError("--rank applies to mlp1 probes only".into()).into()),
        ProbeMode::Mlp1 if granularity.is_some() => {
            return Err(UsageError("--granularity applies to subnetwork probes only".into()).into())
        }
        ProbeMode::Finetune if rank.is_some() || granularity.is_some() => {
            return Err(UsageError("finetune takes neither --rank nor --granularity".into()).into())
        }
        _ => {}
    }
    c.granularity = c.granularity.map(|d| granularity.unwrap_or(d));
    c.rank = c.rank.map(|d| rank.unwrap_or(d));
    if let Some(g) = c.granularity {
        r.record("granularity", g);
    }
    if let Some(k) = c.rank {
        r.record("rank", k);
    }
    train_settings(&mut c, &a.train, &mut r)?;
    r.finish()?;
    c.validate()?;

    let weights = prepare_condition(&loaded.encoder, condition, seed)?;
    let run = run_probe(&c, &loaded.data, &weights)?;
    let out = &a.out;
    create_dir(out)?;
    write_results_csv(&out.join("result.csv"), std::slice::from_ref(&run.result))?;
    write_json(&out.join("result.json"), &json!({ "settings": r.effective, "result": run.result }))?;
    write_step_log_csv(&out.join("steps.csv"), &run.steps)?;
    probe_checkpoint(&run.probe).write(out.join("probe.ckpt"))?;
    if let Some(m) = &run.probe.mask {
        mask_checkpoint(&m.config, &m.layout, m.theta()).write(out.join("mask.ckpt"))?;
    }
    if let Some(s) = &run.result.sparsity {
        sparsity_files(out, s, &format!("{task} {condition} {}", c.setting()))?;
    }
    if mode == ProbeMode::Finetune {
        encoder_checkpoint(&run.probe.encoder, &loaded.tokens).write(out.join("encoder.ckpt"))?;
    }
    println!("{task} {condition} {mode} {}: {} = {:.4}", c.setting(), run.result.metadata.metric, run.result.final_metric);
    Ok(())
}

fn runs_json(path: &Path, settings: &BTreeMap<String, String>, results: &[RunResult], extra: serde_json::Value) -> Result<()> {
    let mut v = json!({ "settings": settings, "results": results });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    write_json(path, &v)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let (mut r, seed) = resolver(&a.common)?;
    let loaded = load(&a.data, &mut r)?;
    let task = loaded.data.task;
    let jobs = r.get("jobs", a.jobs, 1usize)?;
    if jobs == 0 {
        return Err(UsageError("--jobs must be positive".into()).into());
    }
    r.record("kind", format!("{:?}", a.kind).to_lowercase());
    let out = &a.out;
    match a.kind {
        SweepKind::Pareto => {
            let default_ladder = join(&Granularity::ladder());
            let granularities: Vec<Granularity> = list(&r.get("granularities", a.granularities.clone(), default_ladder)?, "granularity")?;
            let ranks: Vec<usize> = list(&r.get("ranks", a.ranks.clone(), join(&MLP1_RANK_LADDER))?, "rank")?;
            let mut t = ExperimentConfig::new(task, Condition::Pretrained, ProbeMode::Subnetwork, seed);
            train_settings(&mut t, &a.train, &mut r)?;
            r.finish()?;
            t.validate()?;
            let (rows, results) = pareto_sweep(&t, &loaded.data, &loaded.encoder, &granularities, &ranks, jobs)?;
            let matched = matched_comparisons(&rows);
            create_dir(out)?;
            write_rows_csv(&out.join("pareto.csv"), &rows)?;
            write_rows_csv(&out.join("matched.csv"), &matched)?;
            write_results_csv(&out.join("runs.csv"), &results)?;
            runs_json(&out.join("runs.json"), &r.effective, &results, json!({ "matched": matched }))?;
            let series = |name: &str, kind: ProbeMode, upper: bool| Series {
                name: name.into(),
                points: rows
                    .iter()
                    .filter(|p| p.kind == kind)
                    .map(|p| (if upper { p.bits_upper } else { p.bits_lower }, p.metric))
                    .collect(),
            };
            let svg = line_chart_svg(
                &format!("{task}: metric against probe complexity"),
                "bits (log2)",
                task.metric_name(),
                &[
                    series("subnetwork", ProbeMode::Subnetwork, false),
                    series("mlp1 (1 bit/param)", ProbeMode::Mlp1, false),
                    series("mlp1 (32 bits/param)", ProbeMode::Mlp1, true),
                ],
                true,
            );
            write_text(&out.join("pareto.svg"), &svg)?;
            println!("{} pareto points, {} matched comparisons in {}", rows.len(), matched.len(), out.display());
        }
        SweepKind::Lambda => {
            let lambdas: Vec<f64> = list(&r.get("lambdas", a.lambdas.clone(), join(&LAMBDA_LADDER))?, "lambda")?;
            let granularity = r.get("granularity", a.granularity, ExperimentConfig::DEFAULT_GRANULARITY)?;
            let mut t = ExperimentConfig::new(task, Condition::Pretrained, ProbeMode::Subnetwork, seed);
            t.granularity = Some(granularity);
            train_settings(&mut t, &a.train, &mut r)?;
            r.finish()?;
            t.validate()?;
            create_dir(&out.join("weights"))?;
            let mut weights = Vec::new();
            for &cond in Condition::ALL {
                let w = prepare_condition(&loaded.encoder, cond, seed)?;
                encoder_checkpoint(&w, &loaded.tokens).write(out.join("weights").join(format!("{cond}.ckpt")))?;
                weights.push((cond, w));
            }
            let conds: Vec<(Condition, &Encoder)> = weights.iter().map(|(c, w)| (*c, w)).collect();
            let results = lambda_sweep(&t, &loaded.data, &conds, &lambdas, jobs)?;
            let finetune = ExperimentConfig { mode: ProbeMode::Finetune, granularity: None, rank: None, ..t.clone() };
            let reference = run_probe(&finetune, &loaded.data, &loaded.encoder)?.result;
            let pretrained: Vec<(f64, f64)> = results
                .iter()
                .filter(|x| x.config.condition == Condition::Pretrained)
                .map(|x| (x.config.lambda_max, x.final_metric))
                .collect();
            let choice = select_lambda_max(&pretrained, reference.final_metric);
            write_results_csv(&out.join("lambda.csv"), &results)?;
            let selection = json!({
                "finetune_metric": reference.final_metric,
                "threshold": "metric >= 0.9 * finetune_metric (relative)",
                "lambda_max": choice.lambda,
                "fallback": choice.fallback,
            });
            runs_json(&out.join("lambda.json"), &r.effective, &results, json!({ "selection": selection, "finetune": reference }))?;
            let by_condition = |value: fn(&RunResult) -> f64| -> Vec<Series> {
                Condition::ALL
                    .iter()
                    .map(|&cond| Series {
                        name: cond.to_string(),
                        points: results.iter().filter(|x| x.config.condition == cond).map(|x| (x.config.lambda_max, value(x))).collect(),
                    })
                    .collect()
            };
            let l0 = by_condition(|x| x.final_expected_l0().unwrap_or(0.0));
            write_text(&out.join("lambda_l0.svg"), &line_chart_svg(&format!("{task}: expected L0"), "lambda_max (log2)", "expected L0", &l0, true))?;
            let metric = by_condition(|x| x.final_metric);
            write_text(
                &out.join("lambda_metric.svg"),
                &line_chart_svg(&format!("{task}: metric"), "lambda_max (log2)", task.metric_name(), &metric, true),
            )?;
            println!("selected lambda_max {} (fallback: {}) in {}", choice.lambda, choice.fallback, out.display());
        }
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    require_file(&a.mask, "mask checkpoint")?;
    let ck = Checkpoint::read(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let (config, layout, theta) = read_mask_checkpoint(&ck)?;
    let s = layer_sparsity(&theta, &config, &layout)?;
    create_dir(&a.out)?;
    sparsity_files(&a.out, &s, &format!("non-zero weights per layer ({})", layout.granularity))?;
    for (l, (all, att)) in s.all.iter().zip(&s.attention).enumerate() {
        println!("layer {l}: all {all:.4} attention {att:.4}");
    }
    Ok(())
}
