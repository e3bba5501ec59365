//! Experiment plans: every (shift, method, seed) combination is trained and
//! evaluated independently, then averaged over seeds.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_cache, make_shift_spec, select_training_subset, EmbeddingCache, ShiftKind, ShiftSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, os_hos_curve, score_eval_set, EvalOptions, EvalReport};
use crate::model::{AdapterParams, ClassHead, ModelState, DEFAULT_PROMPT_LENGTH, DEFAULT_TAU};
use crate::objectives::{oracle_weights, Method, WeightFn};
use crate::par;
use crate::plot::{line_chart, Series};
use crate::trainer::{train, TrainConfig, TrainLog};

/// A compared method: the unadapted model or one of the training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RunMethod {
    ZeroShot,
    Train(Method),
}

impl RunMethod {
    pub fn name(self) -> &'static str {
        match self {
            RunMethod::ZeroShot => "zero_shot",
            RunMethod::Train(m) => m.as_str(),
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zeroshot" | "clip" => Ok(RunMethod::ZeroShot),
            other => other.parse().map(RunMethod::Train),
        }
    }
}

impl TryFrom<String> for RunMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RunMethod> for String {
    fn from(m: RunMethod) -> String {
        m.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub prompt_length: usize,
    /// Width of each context vector; when absent, `min(8, d / prompt_length)`.
    pub context_dim: Option<usize>,
    pub tau: f64,
    pub seed_u: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            prompt_length: DEFAULT_PROMPT_LENGTH,
            context_dim: None,
            tau: DEFAULT_TAU,
            seed_u: 0,
        }
    }
}

impl HeadConfig {
    pub fn context_dim_for(&self, d: usize) -> usize {
        match (self.context_dim, self.prompt_length) {
            (Some(k), _) => k,
            (None, 0) => 0,
            (None, m) => (d / m).clamp(1, 8),
        }
    }

    pub fn build(&self, prototypes: &EmbeddingCache, spec: &ShiftSpec) -> Result<ClassHead> {
        let k = self.context_dim_for(prototypes.d());
        ClassHead::from_prototypes(
            prototypes,
            spec,
            self.prompt_length,
            k,
            self.seed_u,
            self.tau,
        )
    }
}

/// A shift given either by Table-6-style sizes or by explicit label sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSource {
    Generated {
        #[serde(default)]
        name: Option<String>,
        kind: ShiftKind,
        n_p: u32,
        n_e: u32,
        #[serde(default)]
        n_extra_train: u32,
        #[serde(default)]
        n_drop_train: u32,
    },
    Explicit {
        name: String,
        #[serde(flatten)]
        spec: ShiftSpec,
    },
}

impl ShiftSource {
    pub fn resolve(&self) -> Result<(String, ShiftSpec)> {
        match self {
            ShiftSource::Generated {
                name,
                kind,
                n_p,
                n_e,
                n_extra_train,
                n_drop_train,
            } => Ok((
                name.clone().unwrap_or_else(|| kind.to_string()),
                make_shift_spec(*kind, *n_p, *n_e, *n_extra_train, *n_drop_train)?,
            )),
            ShiftSource::Explicit { name, spec } => Ok((name.clone(), spec.clone())),
        }
    }
}

/// The caches one experiment runs on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: EmbeddingCache,
    pub test: EmbeddingCache,
    pub prototypes: EmbeddingCache,
}

impl ExperimentData {
    pub fn new(
        train: EmbeddingCache,
        test: EmbeddingCache,
        prototypes: EmbeddingCache,
    ) -> Result<Self> {
        for (context, c) in [
            ("test cache width", &test),
            ("prototype width", &prototypes),
        ] {
            if c.d() != train.d() {
                return Err(Error::Dimension {
                    context,
                    expected: train.d(),
                    actual: c.d(),
                });
            }
        }
        Ok(ExperimentData {
            train,
            test,
            prototypes,
        })
    }
}

/// Everything except the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub shifts: Vec<(String, ShiftSpec)>,
    pub train_config: TrainConfig,
    pub head: HeadConfig,
    pub methods: Vec<RunMethod>,
    pub seeds: Vec<u64>,
    pub curve_points: usize,
}

/// Which accuracy fills the ACC column of the aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyKind {
    /// Mean of per-class accuracies over the predefined classes.
    #[default]
    Macro,
    /// Fraction of all ID test samples classified correctly.
    Global,
}

/// JSON experiment description consumed by the `run` and `sweep` commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub prototypes: PathBuf,
    pub shifts: Vec<ShiftSource>,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub head: HeadConfig,
    pub methods: Vec<RunMethod>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub curve_points: usize,
    #[serde(default)]
    pub accuracy: AccuracyKind,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        // cache paths are relative to the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.train, &mut cfg.test, &mut cfg.prototypes] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for path in [&self.train, &self.test, &self.prototypes] {
            if !path.is_file() {
                return Err(Error::invalid(
                    "run config",
                    format!("cache {} does not exist", path.display()),
                ));
            }
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        if self.methods.is_empty() {
            return Err(Error::invalid("run config", "no methods to compare"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("run config", "no seeds"));
        }
        if self.shifts.is_empty() {
            return Err(Error::invalid("run config", "no shifts"));
        }
        self.train_config.validate()?;
        Ok(ExperimentPlan {
            shifts: self
                .shifts
                .iter()
                .map(ShiftSource::resolve)
                .collect::<Result<_>>()?,
            train_config: self.train_config.clone(),
            head: self.head.clone(),
            methods: self.methods.clone(),
            seeds: self.seeds.clone(),
            curve_points: self.curve_points,
        })
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        self.validate()?;
        ExperimentData::new(
            load_cache(&self.train)?,
            load_cache(&self.test)?,
            load_cache(&self.prototypes)?,
        )
    }
}

/// Result of one (shift, method, seed) run. Failures are kept, not raised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub shift: String,
    pub method: RunMethod,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub adapter: Option<AdapterParams>,
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Option<TrainLog>,
}

impl RunRecord {
    pub fn stem(&self) -> String {
        format!("{}__{}__seed{}", self.shift, self.method, self.seed)
    }
}

/// Trains (unless zero-shot) and returns the final state with its log.
pub fn fit(
    data: &ExperimentData,
    spec: &ShiftSpec,
    method: RunMethod,
    seed: u64,
    plan: &ExperimentPlan,
) -> Result<(ModelState, Option<TrainLog>)> {
    let head = plan.head.build(&data.prototypes, spec)?;
    match method {
        RunMethod::ZeroShot => Ok((ModelState::new(head), None)),
        RunMethod::Train(m) => {
            let subset = select_training_subset(&data.train, spec)?;
            let oracle = (m == Method::UeoOracle)
                .then(|| oracle_weights(subset.labels(), spec.predefined()));
            let mut cfg = plan.train_config.clone();
            cfg.seed = seed;
            cfg.loss.method = m;
            let (state, log) = train(&subset.to_unlabeled(), head, &cfg, oracle.as_deref())?;
            Ok((state, Some(log)))
        }
    }
}

fn run_task(
    data: &ExperimentData,
    plan: &ExperimentPlan,
    task: &(usize, RunMethod, u64),
) -> RunRecord {
    let (shift_idx, method, seed) = *task;
    let (name, spec) = &plan.shifts[shift_idx];
    let outcome = fit(data, spec, method, seed, plan).and_then(|(state, log)| {
        let opts = EvalOptions {
            curve_points: plan.curve_points,
        };
        let report = evaluate(&state, &data.test, spec, opts)?;
        Ok((report, state, log))
    });
    let mut record = RunRecord {
        shift: name.clone(),
        method,
        seed,
        report: None,
        adapter: None,
        error: None,
        log: None,
    };
    match outcome {
        Ok((report, state, log)) => {
            record.report = Some(report);
            record.adapter = Some(state.into_adapter());
            record.log = log;
        }
        Err(e) => {
            log::error!("run {} failed: {e}", record.stem());
            record.error = Some(e.to_string());
        }
    }
    record
}

fn tasks(plan: &ExperimentPlan) -> Vec<(usize, RunMethod, u64)> {
    let mut out = Vec::new();
    for s in 0..plan.shifts.len() {
        for &m in &plan.methods {
            for &seed in &plan.seeds {
                out.push((s, m, seed));
            }
        }
    }
    out
}

/// Runs every combination of the plan; independent runs execute in parallel.
pub fn run_plan(data: &ExperimentData, plan: &ExperimentPlan) -> Vec<RunRecord> {
    par::map_slice(&tasks(plan), |t| run_task(data, plan, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: RunMethod,
    pub shift: String,
    /// Seed mean; `None` when any run failed.
    pub acc: Option<f64>,
    /// Seed mean; `None` when any run failed or had no OOD samples.
    pub auc: Option<f64>,
    pub runs: usize,
}

fn mean_all(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() || values.iter().any(Option::is_none) {
        return None;
    }
    Some(values.iter().flatten().sum::<f64>() / values.len() as f64)
}

/// Seed means per (method, shift), in first-appearance order of shifts then methods.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    aggregate_by(records, AccuracyKind::Macro)
}

pub fn aggregate_by(records: &[RunRecord], accuracy: AccuracyKind) -> Vec<AggregateRow> {
    let mut shifts: Vec<&str> = Vec::new();
    let mut methods: Vec<RunMethod> = Vec::new();
    for r in records {
        if !shifts.contains(&r.shift.as_str()) {
            shifts.push(&r.shift);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut rows = Vec::new();
    for shift in &shifts {
        for &method in &methods {
            let runs: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.shift == *shift && r.method == method)
                .collect();
            if runs.is_empty() {
                continue;
            }
            let acc: Vec<Option<f64>> = runs
                .iter()
                .map(|r| {
                    r.report.as_ref().map(|x| match accuracy {
                        AccuracyKind::Macro => x.acc,
                        AccuracyKind::Global => x.global_acc,
                    })
                })
                .collect();
            let auc: Vec<Option<f64>> = runs
                .iter()
                .map(|r| r.report.as_ref().and_then(|x| x.auc))
                .collect();
            rows.push(AggregateRow {
                method,
                shift: shift.to_string(),
                acc: mean_all(&acc),
                auc: mean_all(&auc),
                runs: runs.len(),
            });
        }
    }
    rows
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,shift,ACC,AUC\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            r.shift,
            cell(r.acc),
            cell(r.auc)
        ));
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes per-run JSON, training logs, OS/HOS curves and `aggregate.csv`.
pub fn write_run_outputs(
    out_dir: &Path,
    records: &[RunRecord],
    accuracy: AccuracyKind,
) -> Result<Vec<AggregateRow>> {
    for r in records {
        let stem = r.stem();
        write(
            &out_dir.join("runs").join(format!("{stem}.json")),
            serde_json::to_string_pretty(r)?,
        )?;
        if let Some(log) = &r.log {
            write(
                &out_dir.join("logs").join(format!("{stem}.csv")),
                log.to_csv(),
            )?;
        }
        if let Some(rep) = r.report.as_ref().filter(|rep| !rep.os_curve.is_empty()) {
            write(
                &out_dir.join("curves").join(format!("{stem}.csv")),
                rep.curves_csv(),
            )?;
        }
    }
    let order: Vec<String> = records.iter().map(RunRecord::stem).collect();
    write(
        &out_dir.join("runs").join(MANIFEST),
        serde_json::to_string_pretty(&order)?,
    )?;
    let rows = aggregate_by(records, accuracy);
    write(&out_dir.join("aggregate.csv"), aggregate_csv(&rows))?;
    Ok(rows)
}

const MANIFEST: &str = "order.json";

/// Reads back the per-run JSON files written by [`write_run_outputs`], in
/// their original order when the run manifest is present, else by file name.
pub fn load_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let dir = out_dir.join("runs");
    let manifest = dir.join(MANIFEST);
    let paths: Vec<PathBuf> = if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let stems: Vec<String> = serde_json::from_str(&text)?;
        stems
            .iter()
            .map(|s| dir.join(format!("{s}.json")))
            .collect()
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
    };
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// Markdown table of the aggregate.
pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from("| method | shift | ACC | AUC |\n|---|---|---|---|\n");
    for r in rows {
        let pct = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{:.1}", 100.0 * x));
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.method,
            r.shift,
            pct(r.acc),
            pct(r.auc)
        ));
    }
    out
}

/// One OS and one HOS chart per shift, using the first seed of each method.
pub fn curve_charts(records: &[RunRecord]) -> Vec<(String, String)> {
    let mut charts = Vec::new();
    let mut shifts: Vec<&str> = records.iter().map(|r| r.shift.as_str()).collect();
    shifts.dedup();
    shifts.sort_unstable();
    shifts.dedup();
    for shift in shifts {
        let mut os = Vec::new();
        let mut hos = Vec::new();
        let mut seen = Vec::new();
        for r in records.iter().filter(|r| r.shift == shift) {
            let Some(rep) = r.report.as_ref().filter(|rep| !rep.os_curve.is_empty()) else {
                continue;
            };
            if seen.contains(&r.method) {
                continue;
            }
            seen.push(r.method);
            os.push(Series {
                name: r.method.to_string(),
                points: rep.os_curve.clone(),
            });
            hos.push(Series {
                name: r.method.to_string(),
                points: rep.hos_curve.clone(),
            });
        }
        if !os.is_empty() {
            charts.push((
                format!("os_{shift}.svg"),
                line_chart(&format!("OS ({shift})"), "threshold", "OS", &os),
            ));
            charts.push((
                format!("hos_{shift}.svg"),
                line_chart(&format!("HOS ({shift})"), "threshold", "HOS", &hos),
            ));
        }
    }
    charts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    BatchSize,
    WeightFn,
    Lambda,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::WeightFn => "weight_fn",
            SweepAxis::Lambda => "lambda",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "beta" => Ok(SweepAxis::Beta),
            "batch_size" | "batch" => Ok(SweepAxis::BatchSize),
            "weight_fn" | "phi" => Ok(SweepAxis::WeightFn),
            "lambda" | "threshold" => Ok(SweepAxis::Lambda),
            other => Err(Error::invalid("sweep axis", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub method: RunMethod,
    pub shift: String,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub os: Option<f64>,
    pub hos: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Per sweep value, the underlying runs (empty for the threshold axis).
    pub runs: Vec<(String, Vec<RunRecord>)>,
}

fn parse_value<T: FromStr>(axis: SweepAxis, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| {
        Error::invalid(
            "sweep value",
            format!("`{v}` is not valid for {}", axis.as_str()),
        )
    })
}

/// Re-runs the plan once per value of `axis`. The threshold axis trains once
/// and evaluates OS/HOS at every listed threshold.
pub fn sweep(
    data: &ExperimentData,
    plan: &ExperimentPlan,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::invalid("sweep", "no values"));
    }
    let mut result = SweepResult {
        axis,
        rows: Vec::new(),
        runs: Vec::new(),
    };
    if axis == SweepAxis::Lambda {
        let lambdas: Vec<f64> = values
            .iter()
            .map(|v| parse_value(axis, v))
            .collect::<Result<_>>()?;
        let per_task = par::map_slice(&tasks(plan), |&(s, method, seed)| {
            let (_, spec) = &plan.shifts[s];
            let curve = fit(data, spec, method, seed, plan).and_then(|(state, _)| {
                let scored = score_eval_set(&state, &data.test, spec)?;
                os_hos_curve(
                    &scored.preds,
                    &scored.labels,
                    &scored.scores,
                    spec,
                    &lambdas,
                )
            });
            if let Err(e) = &curve {
                log::error!("threshold sweep run {method}/seed{seed} failed: {e}");
            }
            (s, method, curve)
        });
        for (li, value) in values.iter().enumerate() {
            for (s, (name, _)) in plan.shifts.iter().enumerate() {
                for &method in &plan.methods {
                    let picks: Vec<Option<(f64, f64)>> = per_task
                        .iter()
                        .filter(|(rs, rm, _)| *rs == s && *rm == method)
                        .map(|(_, _, curve)| {
                            // the curve is sorted by threshold; look points up by value
                            let pts = curve.as_ref().ok()?;
                            pts.iter()
                                .find(|p| p.lambda == lambdas[li])
                                .map(|p| (p.os, p.hos))
                        })
                        .collect();
                    result.rows.push(SweepRow {
                        value: value.clone(),
                        method,
                        shift: name.clone(),
                        acc: None,
                        auc: None,
                        os: mean_all(&picks.iter().map(|p| p.map(|x| x.0)).collect::<Vec<_>>()),
                        hos: mean_all(&picks.iter().map(|p| p.map(|x| x.1)).collect::<Vec<_>>()),
                    });
                }
            }
        }
        return Ok(result);
    }
    for value in values {
        let mut point = plan.clone();
        match axis {
            SweepAxis::Beta => point.train_config.loss.beta = parse_value(axis, value)?,
            SweepAxis::BatchSize => point.train_config.batch_size = parse_value(axis, value)?,
            SweepAxis::WeightFn => point.train_config.loss.weight_fn = value.parse::<WeightFn>()?,
            SweepAxis::Lambda => unreachable!(),
        }
        point.train_config.validate()?;
        let records = run_plan(data, &point);
        for row in aggregate(&records) {
            result.rows.push(SweepRow {
                value: value.clone(),
                method: row.method,
                shift: row.shift,
                acc: row.acc,
                auc: row.auc,
                os: None,
                hos: None,
            });
        }
        result.runs.push((value.clone(), records));
    }
    Ok(result)
}

type Metric = fn(&SweepRow) -> Option<f64>;

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,method,shift,ACC,AUC,OS,HOS\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.axis.as_str(),
                r.value,
                r.method,
                r.shift,
                cell(r.acc),
                cell(r.auc),
                cell(r.os),
                cell(r.hos)
            ));
        }
        out
    }

    /// One chart per metric that has values; x is the numeric sweep value when
    /// every value parses as a number, otherwise its position.
    pub fn charts(&self) -> Vec<(String, String)> {
        let mut values: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !values.contains(&r.value.as_str()) {
                values.push(&r.value);
            }
        }
        let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
        let x_of = |v: &str| -> f64 {
            let i = values.iter().position(|x| *x == v).unwrap_or(0);
            numeric.as_ref().map_or(i as f64, |xs| xs[i])
        };
        let metrics: [(&str, Metric); 4] = [
            ("ACC", |r| r.acc),
            ("AUC", |r| r.auc),
            ("OS", |r| r.os),
            ("HOS", |r| r.hos),
        ];
        let mut charts = Vec::new();
        for (metric, get) in metrics {
            let mut series: Vec<Series> = Vec::new();
            for r in &self.rows {
                let Some(y) = get(r) else { continue };
                let name = format!("{} ({})", r.method, r.shift);
                match series.iter_mut().find(|s| s.name == name) {
                    Some(s) => s.points.push((x_of(&r.value), y)),
                    None => series.push(Series {
                        name,
                        points: vec![(x_of(&r.value), y)],
                    }),
                }
            }
            if !series.is_empty() {
                let title = format!("{metric} vs {}", self.axis.as_str());
                charts.push((
                    format!("sweep_{}_{}.svg", self.axis.as_str(), metric.to_lowercase()),
                    line_chart(&title, self.axis.as_str(), metric, &series),
                ));
            }
        }
        charts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in [
            "zero_shot",
            "ueo",
            "ueo_sample",
            "entmin",
            "infomax",
            "ueo_oracle",
        ] {
            let m: RunMethod = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert_eq!(
            "zero-shot".parse::<RunMethod>().unwrap(),
            RunMethod::ZeroShot
        );
        let json = serde_json::to_string(&vec![RunMethod::ZeroShot, RunMethod::Train(Method::Ueo)])
            .unwrap();
        assert_eq!(json, r#"["zero_shot","ueo"]"#);
        assert!("dance".parse::<RunMethod>().is_err());
    }

    #[test]
    fn shift_sources_parse() {
        let g: ShiftSource = serde_json::from_str(
            r#"{"kind":"open-partial","n_p":25,"n_e":31,"n_extra_train":3,"n_drop_train":10}"#,
        )
        .unwrap();
        let (name, spec) = g.resolve().unwrap();
        assert_eq!(name, "open-partial");
        assert_eq!(spec.train().len(), 18);
        let e: ShiftSource =
            serde_json::from_str(r#"{"name":"custom","L_p":[0,1],"L_u":[1,2],"L_e":[0,1,2]}"#)
                .unwrap();
        let (name, spec) = e.resolve().unwrap();
        assert_eq!(name, "custom");
        assert_eq!(spec.kind(), ShiftKind::OpenPartial);
    }

    fn rec(method: RunMethod, seed: u64, acc: f64, auc: Option<f64>) -> RunRecord {
        RunRecord {
            shift: "open".into(),
            method,
            seed,
            report: Some(EvalReport {
                per_class_acc: Default::default(),
                acc,
                global_acc: acc,
                auc,
                os_curve: vec![],
                hos_curve: vec![],
                counts: Default::default(),
            }),
            adapter: None,
            error: None,
            log: None,
        }
    }

    #[test]
    fn aggregate_means_and_missing_cells() {
        let mut records = vec![
            rec(RunMethod::ZeroShot, 0, 0.5, Some(0.7)),
            rec(RunMethod::ZeroShot, 1, 0.7, Some(0.9)),
            rec(RunMethod::Train(Method::Ueo), 0, 0.6, None),
        ];
        let mut failed = rec(RunMethod::Train(Method::Entmin), 0, 0.0, None);
        failed.report = None;
        failed.error = Some("boom".into());
        records.push(failed);
        let rows = aggregate(&records);
        assert_eq!(rows.len(), 3);
        assert!((rows[0].acc.unwrap() - 0.6).abs() < 1e-15);
        assert!((rows[0].auc.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(rows[1].auc, None);
        assert_eq!(rows[2].acc, None);
        let csv = aggregate_csv(&rows);
        assert_eq!(
            csv,
            "method,shift,ACC,AUC\nzero_shot,open,0.600000,0.800000\nueo,open,0.600000,NA\nentmin,open,NA,NA\n"
        );
    }

    #[test]
    fn head_context_dim_defaults() {
        let h = HeadConfig::default();
        assert_eq!(h.context_dim_for(64), 8);
        assert_eq!(h.context_dim_for(16), 4);
        assert_eq!(h.context_dim_for(2), 1);
        let none = HeadConfig {
            prompt_length: 0,
            ..HeadConfig::default()
        };
        assert_eq!(none.context_dim_for(64), 0);
    }

    #[test]
    fn sweep_axis_names() {
        assert_eq!(
            "batch-size".parse::<SweepAxis>().unwrap(),
            SweepAxis::BatchSize
        );
        assert!("lr".parse::<SweepAxis>().is_err());
    }
}
