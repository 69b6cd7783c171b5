//! The experiment recipes and the cell scheduler.
//!
//! A run is a list of independent cells, one per (task, method, seed). Cells
//! share the generated data and the pretrained backbone read-only, run on a
//! small worker pool and report rows that are merged in plan order, so the
//! output does not depend on scheduling.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use adra_core::autodiff::Tensor;
use adra_core::baselines::{fit_method, Init, Trained};
use adra_core::datasets::{
    build_corpus, build_hold_one_out, build_one_vs_rest, build_small_mode, generate, generate_grid,
    load_dataset, save_dataset, small_mode_test_sets, LabeledDataset, Split, SyntheticData,
    SyntheticSpec,
};
use adra_core::metrics::{auc, average_precision, dci_disentanglement, DciConfig};
use adra_core::model::{count_params, Backbone, Model, PartitionMode};
use adra_core::trainer::{accuracy, pretrain, LossCurve, Pretrained, TrainConfig};
use adra_core::{Error, Result};
use log::{info, warn};

use crate::bundle::{load_backbone, save_backbone, AdapterBundle};
use crate::config::{Experiment, ExperimentConfig, MethodEntry};
use crate::report::{
    aggregate_csv, aggregate_rows, failures_csv, number, results_csv, table, AggregateRow, Failure,
    LinePlot, Row, Series,
};

/// What one cell trains on and how it is scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskKind {
    OneVsRest(usize),
    HoldOneOut(usize),
    SmallMode {
        primary: usize,
        secondary: usize,
        ratio: f64,
    },
    Disentangle {
        shape: u32,
        color: u32,
    },
}

impl TaskKind {
    /// Task column of the results; small-mode ratios go into the metric name.
    pub fn name(&self) -> String {
        match *self {
            TaskKind::OneVsRest(c) => format!("ovr-c{c}"),
            TaskKind::HoldOneOut(c) => format!("hoo-c{c}"),
            TaskKind::SmallMode {
                primary, secondary, ..
            } => format!("small-a{primary}-b{secondary}"),
            TaskKind::Disentangle { shape, color } => format!("dci-s{shape}-c{color}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub task: TaskKind,
    pub method: MethodEntry,
    pub seed: u64,
}

impl Cell {
    fn file_stem(&self) -> String {
        match self.task {
            TaskKind::SmallMode { ratio, .. } => {
                format!(
                    "{}-r{}-{}-s{}",
                    self.task.name(),
                    number(ratio),
                    self.method,
                    self.seed
                )
            }
            _ => format!("{}-{}-s{}", self.task.name(), self.method, self.seed),
        }
    }
}

/// Read-only inputs shared by every cell of a run.
pub struct Workspace {
    pub data: SyntheticData,
    pub corpus: Tensor<f32>,
    /// Exhaustive factor grid, for disentanglement runs.
    pub grid: Option<LabeledDataset>,
    pub backbone: Backbone,
    pub train: TrainConfig,
}

/// What a finished cell hands back.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub rows: Vec<Row>,
    pub curve: LossCurve,
    pub bundle: Option<AdapterBundle>,
}

/// Everything a run produced, before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub rows: Vec<Row>,
    pub failures: Vec<Failure>,
    pub aggregate: Vec<AggregateRow>,
    pub curves: Vec<(String, LossCurve)>,
    pub bundles: Vec<(String, AdapterBundle)>,
}

fn metric_name(kind: &str, ratio: f64) -> String {
    format!("{kind}@{}", number(ratio))
}

/// Train, test and reserve splits, generated or read from `data.dir`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    match &cfg.data.dir {
        Some(dir) => Ok(SyntheticData {
            train: load_dataset(&dir.join("train.adra"), Split::Train)?,
            test: load_dataset(&dir.join("test.adra"), Split::Test)?,
            reserve: load_dataset(&dir.join("reserve.adra"), Split::Train)?,
        }),
        None => generate(&cfg.data.synthetic(), cfg.data.seed),
    }
}

/// Assemble the shared inputs of a run around an already loaded backbone.
pub fn workspace(cfg: &ExperimentConfig, backbone: Backbone) -> Result<Workspace> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let m = cfg.data.corpus_size.unwrap_or(data.reserve.len());
    let corpus = build_corpus(
        &data.reserve,
        &BTreeSet::new(),
        m,
        cfg.data.seed ^ 0xC0_4E,
        true,
    )?
    .images;
    let grid = match cfg.experiment {
        Experiment::Disentangle => Some(generate_grid(&cfg.data.factors(), cfg.data.seed)?),
        _ => None,
    };
    Ok(Workspace {
        data,
        corpus,
        grid,
        backbone,
        train: cfg.train_config()?,
    })
}

/// Every cell of the configured experiment, in output order.
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let seeds = cfg.seed_list()?;
    let classes: Vec<usize> = if cfg.classes.is_empty() {
        (0..cfg.data.classes).collect()
    } else {
        cfg.classes.clone()
    };
    let mut tasks = Vec::new();
    match cfg.experiment {
        Experiment::Ovr => tasks.extend(classes.iter().map(|&c| TaskKind::OneVsRest(c))),
        Experiment::Hoo => tasks.extend(classes.iter().map(|&c| TaskKind::HoldOneOut(c))),
        Experiment::SmallMode => {
            let mut ratios = cfg.small_mode.ratios.clone();
            if !ratios.contains(&1.0) {
                ratios.push(1.0);
            }
            for &[primary, secondary] in &cfg.small_mode.pairs {
                for &ratio in &ratios {
                    tasks.push(TaskKind::SmallMode {
                        primary,
                        secondary,
                        ratio,
                    });
                }
            }
        }
        Experiment::Disentangle => tasks.extend(
            cfg.disentangle
                .nominal
                .iter()
                .map(|&[shape, color]| TaskKind::Disentangle { shape, color }),
        ),
        Experiment::Pretrain => return Err(Error::Config("pretraining has no cells".into())),
    }
    let mut cells = Vec::new();
    for task in tasks {
        for &method in &cfg.methods {
            for &seed in &seeds {
                cells.push(Cell { task, method, seed });
            }
        }
    }
    Ok(cells)
}

fn fit(
    ws: &Workspace,
    cell: &Cell,
    nominal: &Tensor<f32>,
    corpus: &Tensor<f32>,
) -> Result<Trained> {
    let spec = cell.method.spec();
    let train = TrainConfig {
        experts: cell.method.experts.unwrap_or(ws.train.experts),
        ..ws.train.clone()
    };
    let backbone = (spec.init == Init::Pretrained).then_some(&ws.backbone);
    fit_method(
        &spec,
        &ws.backbone.config,
        backbone,
        nominal,
        Some(corpus),
        &train,
        cell.seed,
    )
}

/// Run a single cell.
pub fn run_cell(ws: &Workspace, cell: &Cell) -> Result<CellOutput> {
    let row = |metric: String, value: f64| Row {
        task: cell.task.name(),
        method: cell.method.to_string(),
        seed: cell.seed,
        metric,
        value,
    };
    let (rows, trained) = match cell.task {
        TaskKind::OneVsRest(c) => {
            let (nominal, test) = build_one_vs_rest(&ws.data.train, &ws.data.test, c)?;
            let trained = fit(ws, cell, &nominal.images, &ws.corpus)?;
            let v = auc(&trained.evaluate(&test)?)?;
            (vec![row("auc".into(), v)], trained)
        }
        TaskKind::HoldOneOut(c) => {
            let (nominal, test) = build_hold_one_out(&ws.data.train, &ws.data.test, c)?;
            let trained = fit(ws, cell, &nominal.images, &ws.corpus)?;
            let ap = average_precision(&trained.evaluate(&test)?)?;
            (vec![row("ap".into(), ap.value)], trained)
        }
        TaskKind::SmallMode {
            primary,
            secondary,
            ratio,
        } => {
            let nominal = build_small_mode(&ws.data.train, primary, secondary, ratio, cell.seed)?;
            let (first, second) = small_mode_test_sets(&ws.data.test, primary, secondary)?;
            let trained = fit(ws, cell, &nominal.images, &ws.corpus)?;
            let a = auc(&trained.evaluate(&first)?)?;
            let b = auc(&trained.evaluate(&second)?)?;
            (
                vec![
                    row(metric_name("auc-primary", ratio), a),
                    row(metric_name("auc-secondary", ratio), b),
                ],
                trained,
            )
        }
        TaskKind::Disentangle { shape, color } => {
            let grid = ws
                .grid
                .as_ref()
                .ok_or_else(|| Error::Contract("disentanglement needs the factor grid".into()))?;
            let rows = grid.factors.as_ref().expect("grid rows carry factors");
            let (inside, outside): (Vec<usize>, Vec<usize>) =
                (0..grid.len()).partition(|&i| rows[i][0] == shape && rows[i][1] == color);
            let trained = fit(
                ws,
                cell,
                &grid.images.select_rows(&inside),
                &grid.images.select_rows(&outside),
            )?;
            let reps = trained.representation(&grid.images)?;
            let d = reps.row_len();
            let reps: Vec<f64> = reps.data().iter().map(|&v| v as f64).collect();
            let factors: Vec<u32> = rows.iter().flatten().copied().collect();
            let dci = dci_disentanglement(&reps, &factors, grid.len(), d, &DciConfig::default())?;
            (vec![row("dci".into(), dci.disentanglement)], trained)
        }
    };
    let bundle = (trained.spec.mode == PartitionMode::Adra)
        .then(|| AdapterBundle::from_model(&trained.model, &cell.file_stem()))
        .transpose()?;
    Ok(CellOutput {
        rows,
        curve: trained.curve,
        bundle,
    })
}

/// Worker count: `ADRA_THREADS` if set, else the available parallelism.
pub fn worker_count(cells: usize) -> usize {
    let wanted = std::env::var("ADRA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    wanted.min(cells).max(1)
}

/// Run `cells` on a pool of `threads` workers; results come back in plan order.
pub fn run_cells(ws: &Workspace, cells: &[Cell], threads: usize) -> Vec<Result<CellOutput>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellOutput>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let start = Instant::now();
                let out = run_cell(ws, cell);
                match &out {
                    Ok(o) => info!(
                        "[{}/{}] {} {} seed {}: {} ({:.1}s)",
                        i + 1,
                        cells.len(),
                        cell.task.name(),
                        cell.method,
                        cell.seed,
                        o.rows
                            .iter()
                            .map(|r| format!("{}={:.4}", r.metric, r.value))
                            .collect::<Vec<_>>()
                            .join(" "),
                        start.elapsed().as_secs_f64()
                    ),
                    Err(e) => warn!(
                        "{} {} seed {} failed: {e}",
                        cell.task.name(),
                        cell.method,
                        cell.seed
                    ),
                }
                slots
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|o| o.expect("every cell ran"))
        .collect()
}

/// Relative AUC rows: each `auc-*@r` divided by the same cell's `auc-*@1`.
pub fn relative_rows(rows: &[Row]) -> Vec<Row> {
    let mut out = Vec::new();
    for r in rows {
        let Some((kind, ratio)) = r.metric.split_once('@') else {
            continue;
        };
        let Some(which) = kind.strip_prefix("auc-") else {
            continue;
        };
        let reference = rows.iter().find(|b| {
            b.task == r.task
                && b.method == r.method
                && b.seed == r.seed
                && b.metric == format!("{kind}@1")
        });
        if let Some(b) = reference.filter(|b| b.value > 0.0) {
            out.push(Row {
                metric: format!("rel-{which}@{ratio}"),
                value: r.value / b.value,
                ..r.clone()
            });
        }
    }
    out
}

/// Execute every cell; failures are recorded rather than propagated.
pub fn execute(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RunOutcome> {
    let cells = plan(cfg)?;
    let threads = worker_count(cells.len());
    info!("{} cells on {threads} worker(s)", cells.len());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut curves = Vec::new();
    let mut bundles = Vec::new();
    for (cell, out) in cells.iter().zip(run_cells(ws, &cells, threads)) {
        match out {
            Ok(o) => {
                rows.extend(o.rows);
                if !o.curve.records.is_empty() {
                    curves.push((cell.file_stem(), o.curve));
                }
                if let Some(b) = o.bundle {
                    bundles.push((cell.file_stem(), b));
                }
            }
            Err(e) => failures.push(Failure {
                task: cell.task.name(),
                method: cell.method.to_string(),
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }
    let derived = relative_rows(&rows);
    rows.extend(derived);
    let aggregate = aggregate_rows(&rows);
    Ok(RunOutcome {
        rows,
        failures,
        aggregate,
        curves,
        bundles,
    })
}

fn method_names(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.methods.iter().map(|m| m.to_string()).collect()
}

/// Mean of `metric@r` per method over the rows of `tasks`, as one series per method.
fn sweep_series(
    agg: &[AggregateRow],
    tasks: &[String],
    which: &str,
    methods: &[String],
) -> Vec<Series> {
    methods
        .iter()
        .map(|m| {
            let mut points: Vec<(f64, f64, usize)> = Vec::new();
            for r in agg
                .iter()
                .filter(|r| &r.method == m && tasks.contains(&r.task))
            {
                let Some(ratio) = r
                    .metric
                    .strip_prefix(which)
                    .and_then(|s| s.strip_prefix('@'))
                else {
                    continue;
                };
                let Ok(x) = ratio.parse::<f64>() else {
                    continue;
                };
                match points.iter_mut().find(|p| p.0 == x) {
                    Some(p) => {
                        p.1 += r.mean;
                        p.2 += 1;
                    }
                    None => points.push((x, r.mean, 1)),
                }
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name: m.clone(),
                points: points
                    .into_iter()
                    .map(|(x, s, n)| (x, s / n as f64))
                    .collect(),
            }
        })
        .collect()
}

/// Table with one row per ratio and one column per method.
fn sweep_table(series: &[Series], title: &str) -> String {
    let mut ratios: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let mut out = format!("{title}\n{:>6}", "r");
    for s in series {
        out.push_str(&format!(" {:>9}", s.name));
    }
    out.push('\n');
    for r in ratios {
        out.push_str(&format!("{:>6}", number(r)));
        for s in series {
            match s.points.iter().find(|p| p.0 == r) {
                Some(p) => out.push_str(&format!(" {:>9.4}", p.1)),
                None => out.push_str(&format!(" {:>9}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

/// Write CSVs, tables, plots, curves and bundles under the output directory.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write(&dir.join("results.csv"), &results_csv(&out.rows))?;
    write(&dir.join("aggregate.csv"), &aggregate_csv(&out.aggregate))?;
    write(&dir.join("failures.csv"), &failures_csv(&out.failures))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let methods = method_names(cfg);
    let summary = match cfg.experiment {
        Experiment::Ovr => table(&out.aggregate, "auc", &methods),
        Experiment::Hoo => table(&out.aggregate, "ap", &methods),
        Experiment::Disentangle => table(&out.aggregate, "dci", &methods),
        Experiment::SmallMode => {
            let mut text = String::new();
            let mut all = Vec::new();
            for &[a, b] in &cfg.small_mode.pairs {
                let task = format!("small-a{a}-b{b}");
                all.push(task.clone());
                for which in ["rel-secondary", "rel-primary"] {
                    let series =
                        sweep_series(&out.aggregate, std::slice::from_ref(&task), which, &methods);
                    let plot = LinePlot {
                        title: format!("{which} AUC, classes {a} + r·{b}"),
                        x_label: "r".into(),
                        y_label: "AUC(r) / AUC(1)".into(),
                        series,
                    };
                    write(&dir.join(format!("{task}-{which}.svg")), &plot.to_svg())?;
                }
            }
            for which in ["rel-secondary", "rel-primary"] {
                let series = sweep_series(&out.aggregate, &all, which, &methods);
                text.push_str(&sweep_table(&series, &format!("{which} (mean over pairs)")));
                text.push('\n');
                let plot = LinePlot {
                    title: format!("{which} AUC, mean over pairs"),
                    x_label: "r".into(),
                    y_label: "AUC(r) / AUC(1)".into(),
                    series,
                };
                write(&dir.join(format!("small-mode-{which}.svg")), &plot.to_svg())?;
            }
            text
        }
        Experiment::Pretrain => String::new(),
    };
    write(&dir.join("table.txt"), &summary)?;
    if !out.curves.is_empty() {
        let curves = dir.join("curves");
        fs::create_dir_all(&curves)?;
        for (name, curve) in &out.curves {
            write(&curves.join(format!("{name}.csv")), &curve.to_csv())?;
        }
    }
    if cfg.save_bundles && !out.bundles.is_empty() {
        let bundles = dir.join("bundles");
        fs::create_dir_all(&bundles)?;
        for (name, b) in &out.bundles {
            b.save(&bundles.join(format!("{name}.adrb")))?;
        }
    }
    Ok(())
}

/// Load the configured snapshot, run every cell and write the reports.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let path = cfg.backbone_path();
    if !path.is_file() {
        return Err(Error::Config(format!(
            "no pretrained backbone at {}; run `adra pretrain` first",
            path.display()
        )));
    }
    let backbone = load_backbone(&path, &cfg.backbone_config())?;
    info!(
        "backbone {} ({})",
        path.display(),
        &hex::encode(backbone.hash())[..16]
    );
    let ws = workspace(cfg, backbone)?;
    let out = execute(cfg, &ws)?;
    write_outputs(cfg, &out)?;
    Ok(out)
}

/// Result of [`pretrain_backbone`].
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub pretrained: Pretrained,
    /// Top-1 accuracy on an independently drawn split of the same classes.
    pub accuracy: f64,
}

/// Pretrain on classification of the reserved shape/color pairs, which are
/// disjoint from every task class.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let spec = SyntheticSpec {
        train_per_class: cfg.pretrain.train_per_class,
        test_per_class: 1,
        ..cfg.data.synthetic()
    };
    let train = generate(&spec, cfg.pretrain.seed)?.reserve;
    let held_out = generate(
        &SyntheticSpec {
            train_per_class: (cfg.pretrain.train_per_class / 4).max(10),
            ..spec.clone()
        },
        cfg.pretrain.seed.wrapping_add(1),
    )?
    .reserve;
    let mut model = Model::for_pretraining(cfg.backbone_config(), cfg.pretrain.seed)?;
    let tc = cfg.pretrain.train_config(&cfg.train_config()?);
    let pretrained = pretrain(&mut model, &train, &tc, cfg.pretrain.seed)?;
    let accuracy = accuracy(&model, &held_out)?;
    info!("pretraining accuracy {accuracy:.4}");
    Ok(PretrainOutcome {
        pretrained,
        accuracy,
    })
}

/// Pretrain, then write the snapshot, its loss curve and the task datasets.
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let out = pretrain_backbone(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let path = cfg.backbone_path();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_backbone(&path, &out.pretrained.backbone)?;
    write(
        &dir.join("pretrain-loss.csv"),
        &out.pretrained.curve.to_csv(),
    )?;
    write(
        &dir.join("pretrain.txt"),
        &format!(
            "backbone {}\nhash {}\nheld-out accuracy {}\n",
            path.display(),
            hex::encode(out.pretrained.hash),
            number(out.accuracy)
        ),
    )?;
    let data = load_data(cfg)?;
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir)?;
    save_dataset(&data_dir.join("train.adra"), &data.train)?;
    save_dataset(&data_dir.join("test.adra"), &data.test)?;
    save_dataset(&data_dir.join("reserve.adra"), &data.reserve)?;
    Ok(out)
}

/// Storage for 1..=10 tasks as CSV, plus the matching plot.
pub fn report_params(cfg: &ExperimentConfig) -> Result<(String, String)> {
    let config = cfg.backbone_config();
    let experts = cfg.train_config()?.experts;
    let mut csv = String::from("tasks,theta,alpha_per_task,adra_total,naive_total\n");
    let (mut adra, mut naive) = (Vec::new(), Vec::new());
    for t in 1..=10 {
        let c = count_params(&config, Some(experts), t)?;
        csv.push_str(&format!(
            "{t},{},{},{},{}\n",
            c.theta, c.alpha_per_task, c.adra_total, c.naive_total
        ));
        adra.push((t as f64, c.adra_total as f64));
        naive.push((t as f64, c.naive_total as f64));
    }
    let plot = LinePlot {
        title: format!("parameters to serve T tasks (K = {experts})"),
        x_label: "tasks T".into(),
        y_label: "parameters".into(),
        series: vec![
            Series {
                name: "adapters".into(),
                points: adra,
            },
            Series {
                name: "full copies".into(),
                points: naive,
            },
        ],
    };
    Ok((csv, plot.to_svg()))
}
