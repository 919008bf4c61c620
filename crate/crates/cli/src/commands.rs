use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use carprune::importance::{write_car_table, write_class_car_table};
use carprune::interpret::{
    crop_patch, write_class_comparison, write_class_interpretations, write_patches, ClassInterpretation,
};
use carprune::pruner::BenchReport;
use carprune::train::EpochLog;
use carprune::{
    benchmark_indexes, car_class_scores, car_scores, class_interpretation, evaluate, greedy_prune, load_model,
    per_class_compare, prune_report, rank_filters, save_model, top_patches, train, weight_importance, FilterMask,
    FilterRef, LabeledDataset, Network, PruneConfig, SgdConfig, StopRule, WeightDirection,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::datasets::{load_subset, DatasetKind, Split};
use crate::error::{CliError, CliResult};
use crate::{
    ClassCompareArgs, ClassLabelsArgs, Cli, Command, CompareArgs, DataArgs, InterpretCommand, PatchesArgs, PruneArgs,
    PruneLoopArgs, ScoreArgs, ScoreIndex, SgdArgs, TrainArgs,
};

/// File names written into the output directory.
pub mod files {
    pub const MANIFEST: &str = "run.json";
    pub const MODEL: &str = "model.cpm";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const SCORES: &str = "scores.csv";
    pub const CLASS_SCORES: &str = "class_scores.csv";
    pub const TRACE: &str = "trace.jsonl";
    pub const REPORT: &str = "report.json";
    pub const PATCHES: &str = "patches.csv";
    pub const PATCH_PIXELS: &str = "patch_pixels.jsonl";
    pub const CLASS_COMPARE_CSV: &str = "class_compare.csv";
    pub const CLASS_COMPARE_JSON: &str = "class_compare.json";
    pub const CLASS_LABELS: &str = "class_labels.csv";
    pub const BENCH_JSON: &str = "bench.json";
    pub const BENCH_CSV: &str = "bench.csv";
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub results: Value,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::output(&path, e))?);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::output(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(carprune::Error::from)?;
            w.write_all(b"\n").map_err(|e| CliError::output(name, e))
        })
    }

    fn model(&mut self, net: &Network) -> CliResult<()> {
        let path = self.dir.join(files::MODEL);
        save_model(net, &path)?;
        self.files.push(path);
        Ok(())
    }
}

fn unix_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub fn execute(cli: &Cli, workers: usize) -> CliResult<RunSummary> {
    let started = unix_millis();
    let mut out = Outputs::new(&cli.out)?;
    let results = match &cli.command {
        Command::Train(a) => cmd_train(cli.seed, a, &mut out)?,
        Command::Score(a) => cmd_score(cli.seed, a, &mut out)?,
        Command::Prune(a) => cmd_prune(cli.seed, a, &mut out)?,
        Command::Interpret(InterpretCommand::Patches(a)) => cmd_patches(cli.seed, a, &mut out)?,
        Command::Interpret(InterpretCommand::ClassCompare(a)) => cmd_class_compare(cli.seed, a, &mut out)?,
        Command::Interpret(InterpretCommand::ClassLabels(a)) => cmd_class_labels(cli.seed, a, &mut out)?,
        Command::Compare(a) => cmd_compare(cli.seed, a, &mut out)?,
    };
    let outputs: Vec<String> = out
        .files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let manifest = json!({
        "tool": "carprune",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "seed": cli.seed,
        "workers": workers,
        "out_dir": cli.out,
        "config": cli,
        "outputs": outputs,
        "results": results,
        "started_unix_ms": started,
        "finished_unix_ms": unix_millis(),
    });
    out.json(files::MANIFEST, &manifest)?;
    Ok(RunSummary {
        outputs: out.files,
        results,
    })
}

fn dataset_kind(data: &DataArgs, net: &Network) -> CliResult<DatasetKind> {
    if let Some(k) = data.dataset {
        return Ok(k);
    }
    match net.input_shape() {
        [1, 28, 28] => Ok(DatasetKind::Mnist),
        [3, 32, 32] => Ok(DatasetKind::Cifar10),
        s => Err(CliError::Usage(format!(
            "cannot infer the dataset for input shape {s:?}; pass --dataset"
        ))),
    }
}

fn data_dir(data: &DataArgs) -> CliResult<&Path> {
    data.data_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--data-dir is required for this command".into()))
}

fn eval_data(seed: u64, data: &DataArgs, kind: DatasetKind) -> CliResult<LabeledDataset> {
    Ok(load_subset(
        kind,
        data_dir(data)?,
        data.eval_split,
        data.eval_subset,
        seed,
    )?)
}

fn train_data(seed: u64, data: &DataArgs, sgd: &SgdArgs, kind: DatasetKind) -> CliResult<LabeledDataset> {
    Ok(load_subset(
        kind,
        data_dir(data)?,
        Split::Train,
        sgd.train_subset,
        seed,
    )?)
}

fn sgd_config(sgd: &SgdArgs, epochs: usize) -> SgdConfig {
    SgdConfig {
        epochs,
        learning_rate: sgd.lr,
        batch_size: sgd.batch_size,
    }
}

fn cmd_train(seed: u64, a: &TrainArgs, out: &mut Outputs) -> CliResult<Value> {
    let kind = a.data.dataset.unwrap_or(a.preset.dataset());
    if kind != a.preset.dataset() {
        return Err(CliError::Usage(format!(
            "preset {} needs the {:?} dataset",
            a.preset.id(),
            a.preset.dataset()
        )));
    }
    let mut net = a.preset.build(seed)?;
    let log = if a.epochs == 0 {
        Vec::new()
    } else {
        let data = train_data(seed, &a.data, &a.sgd, kind)?;
        train(&mut net, &data, &sgd_config(&a.sgd, a.epochs), &FilterMask::new(), seed)?
    };
    out.model(&net)?;
    out.write(files::TRAIN_LOG, |w| write_train_log(&log, w))?;
    let accuracy = match a.data.data_dir {
        Some(_) => Some(evaluate(&net, &eval_data(seed, &a.data, kind)?, &FilterMask::new())?.overall_accuracy),
        None => None,
    };
    Ok(json!({
        "preset": a.preset.id(),
        "parameters": net.parameter_count(),
        "epochs": log,
        "eval_accuracy": accuracy,
    }))
}

fn write_train_log<W: Write>(log: &[EpochLog], w: W) -> CliResult<()> {
    let mut csv = csv_writer(w);
    csv.write_record(["epoch", "mean_loss", "steps"])
        .map_err(carprune::Error::from)?;
    for e in log {
        csv.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.steps.to_string()])
            .map_err(carprune::Error::from)?;
    }
    csv.flush().map_err(|e| CliError::output(files::TRAIN_LOG, e))
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn cmd_score(seed: u64, a: &ScoreArgs, out: &mut Outputs) -> CliResult<Value> {
    let net = load_model(&a.model)?;
    let layer = a.layer.resolve(&net)?;
    let table = match a.index {
        ScoreIndex::Car => {
            let data = eval_data(seed, &a.data, dataset_kind(&a.data, &net)?)?;
            car_scores(&net, &data, layer, &FilterMask::new())?
        }
        ScoreIndex::CarClass => {
            let data = eval_data(seed, &a.data, dataset_kind(&a.data, &net)?)?;
            let table = car_class_scores(&net, &data, layer, &FilterMask::new())?;
            out.write(files::CLASS_SCORES, |w| Ok(write_class_car_table(&table, w)?))?;
            table.to_car_table()
        }
        ScoreIndex::WeightIn => weight_importance(&net, layer, WeightDirection::Incoming)?,
        ScoreIndex::WeightOut => weight_importance(&net, layer, WeightDirection::Outgoing)?,
    };
    if a.index != ScoreIndex::CarClass {
        out.write(files::SCORES, |w| Ok(write_car_table(&table, w)?))?;
    }
    let ranked: Vec<usize> = rank_filters(&table.scores).iter().map(|s| s.filter.filter).collect();
    Ok(json!({
        "layer": layer,
        "index": table.index.name(),
        "baseline_accuracy": table.baseline_accuracy,
        "sample_count": table.sample_count,
        "ranked_least_important_first": ranked,
    }))
}

fn prune_config(
    seed: u64,
    p: &PruneLoopArgs,
    net: &Network,
    stop: StopRule,
    index: carprune::ImportanceIndex,
) -> CliResult<PruneConfig> {
    let target_layers = p.layers.iter().map(|l| l.resolve(net)).collect::<Result<Vec<_>, _>>()?;
    Ok(PruneConfig {
        target_layers,
        stop,
        finetune: (p.finetune_epochs > 0).then(|| sgd_config(&p.sgd, p.finetune_epochs)),
        index,
        rescore_every_iteration: !p.no_rescore,
        compact_between_iterations: p.compact_between,
        seed,
    })
}

/// Evaluation data plus the fine-tuning data (the evaluation set stands in
/// when no fine-tuning is configured, since it is then never read).
fn prune_data(seed: u64, p: &PruneLoopArgs, net: &Network) -> CliResult<(LabeledDataset, Option<LabeledDataset>)> {
    let kind = dataset_kind(&p.data, net)?;
    let eval = eval_data(seed, &p.data, kind)?;
    let train = if p.finetune_epochs > 0 {
        Some(train_data(seed, &p.data, &p.sgd, kind)?)
    } else {
        None
    };
    Ok((eval, train))
}

fn cmd_prune(seed: u64, a: &PruneArgs, out: &mut Outputs) -> CliResult<Value> {
    let net = load_model(&a.model)?;
    let stop = match (a.rho, a.budget, a.exhaustive) {
        (Some(rho), _, _) => StopRule::RelativeAccuracy(rho),
        (_, Some(b), _) => StopRule::FilterBudget(b),
        (_, _, true) => StopRule::None,
        _ => StopRule::RelativeAccuracy(carprune::pruner::DEFAULT_RHO),
    };
    let cfg = prune_config(seed, &a.prune, &net, stop, a.index.index())?;
    let (eval, train) = prune_data(seed, &a.prune, &net)?;
    let outcome = greedy_prune(&net, train.as_ref().unwrap_or(&eval), &eval, &cfg)?;
    let compacted = outcome.compacted()?;
    let report = prune_report(&outcome.trace, &net, &compacted)?;
    out.model(&compacted)?;
    out.write(files::TRACE, |w| Ok(outcome.trace.write_jsonl(w)?))?;
    out.json(files::REPORT, &report)?;
    Ok(json!({
        "prune_config": cfg,
        "stop_reason": report.stop_reason.name(),
        "filters_pruned": report.filters_pruned,
        "baseline_accuracy": report.baseline_accuracy,
        "final_accuracy": report.final_accuracy,
        "parameter_ratio": report.compression.parameter_ratio,
    }))
}

fn cmd_patches(seed: u64, a: &PatchesArgs, out: &mut Outputs) -> CliResult<Value> {
    let net = load_model(&a.model)?;
    let layer = a.layer.resolve(&net)?;
    let data = eval_data(seed, &a.data, dataset_kind(&a.data, &net)?)?;
    let records = top_patches(&net, &data, layer, a.k)?;
    out.write(files::PATCHES, |w| Ok(write_patches(&records, w)?))?;
    if a.dump_crops {
        out.write(files::PATCH_PIXELS, |w| {
            for rec in &records {
                for (rank, hit) in rec.hits.iter().enumerate() {
                    let crop = crop_patch(&data, hit)?;
                    let line = json!({
                        "layer": rec.filter.layer,
                        "filter": rec.filter.filter,
                        "rank": rank + 1,
                        "image_id": hit.image_id,
                        "shape": crop.shape(),
                        "pixels": crop.data(),
                    });
                    serde_json::to_writer(&mut *w, &line).map_err(carprune::Error::from)?;
                    w.write_all(b"\n")
                        .map_err(|e| CliError::output(files::PATCH_PIXELS, e))?;
                }
            }
            Ok(())
        })?;
    }
    Ok(json!({
        "layer": layer,
        "k": a.k,
        "filters": records.len(),
        "hits": records.iter().map(|r| r.hits.len()).sum::<usize>(),
    }))
}

fn cmd_class_compare(seed: u64, a: &ClassCompareArgs, out: &mut Outputs) -> CliResult<Value> {
    let net_a = load_model(&a.model)?;
    let net_b = load_model(&a.model_b)?;
    let data = eval_data(seed, &a.data, dataset_kind(&a.data, &net_a)?)?;
    let cmp = per_class_compare(&net_a, &net_b, &data)?;
    out.write(files::CLASS_COMPARE_CSV, |w| Ok(write_class_comparison(&cmp, w)?))?;
    out.json(files::CLASS_COMPARE_JSON, &cmp)?;
    Ok(json!({
        "band_percent": cmp.band_percent,
        "classes_considered": cmp.classes_considered,
        "classes_within_band": cmp.classes_within_band,
        "summary_fraction": cmp.summary_fraction,
        "overall_a": cmp.overall_a,
        "overall_b": cmp.overall_b,
    }))
}

fn cmd_class_labels(seed: u64, a: &ClassLabelsArgs, out: &mut Outputs) -> CliResult<Value> {
    let net = load_model(&a.model)?;
    let layer = a.layer.resolve(&net)?;
    let data = eval_data(seed, &a.data, dataset_kind(&a.data, &net)?)?;
    let table = car_class_scores(&net, &data, layer, &FilterMask::new())?;
    let filters: Vec<usize> = match a.filter {
        Some(f) => vec![f],
        None => (0..net.filter_count(layer)?).collect(),
    };
    let items = filters
        .iter()
        .map(|&f| class_interpretation(&table, FilterRef::new(layer, f), a.t))
        .collect::<Result<Vec<ClassInterpretation>, _>>()?;
    out.write(files::CLASS_SCORES, |w| Ok(write_class_car_table(&table, w)?))?;
    out.write(files::CLASS_LABELS, |w| Ok(write_class_interpretations(&items, w)?))?;
    Ok(json!({ "layer": layer, "t": a.t, "filters": filters }))
}

fn cmd_compare(seed: u64, a: &CompareArgs, out: &mut Outputs) -> CliResult<Value> {
    let net = load_model(&a.model)?;
    let base = prune_config(
        seed,
        &a.prune,
        &net,
        StopRule::FilterBudget(a.budget),
        carprune::ImportanceIndex::Car,
    )?;
    let (eval, train) = prune_data(seed, &a.prune, &net)?;
    let indexes: Vec<_> = a.indexes.iter().map(|i| i.index()).collect();
    let report = benchmark_indexes(&net, train.as_ref().unwrap_or(&eval), &eval, &base, a.budget, &indexes)?;
    out.json(files::BENCH_JSON, &report)?;
    out.write(files::BENCH_CSV, |w| write_bench(&report, w))?;
    Ok(json!({
        "budget": report.budget,
        "ranking": report.ranking.iter().map(|i| i.name()).collect::<Vec<_>>(),
    }))
}

fn write_bench<W: Write>(report: &BenchReport, w: W) -> CliResult<()> {
    let mut csv = csv_writer(w);
    csv.write_record([
        "index",
        "filters_pruned",
        "baseline_accuracy",
        "final_accuracy",
        "params_remaining",
        "parameter_ratio",
        "rank",
    ])
    .map_err(carprune::Error::from)?;
    for row in &report.rows {
        let rank = report.ranking.iter().position(|&i| i == row.index).unwrap() + 1;
        csv.write_record([
            row.index.name().to_string(),
            row.filters_pruned.to_string(),
            row.baseline_accuracy.to_string(),
            row.final_accuracy.to_string(),
            row.params_remaining.to_string(),
            row.parameter_ratio.to_string(),
            rank.to_string(),
        ])
        .map_err(carprune::Error::from)?;
    }
    csv.flush().map_err(|e| CliError::output(files::BENCH_CSV, e))
}
