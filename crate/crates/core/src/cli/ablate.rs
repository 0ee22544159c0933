use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::train::{evaluate, Pipeline, PipelineConfig, StudentRoute};
use crate::verbalizer::{Verbalizer, VerbalizerArch};

/// Predefined cell lists mirroring the ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Intermediate/last-layer operation pairs.
    Ops,
    /// Matching strategies and the cumulative components of the sampler.
    Strategy,
    /// Every verbalizer architecture.
    Verbalizer,
    /// Reinforcement step off, on, half length, and reinforcement alone.
    Rs,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Strategy, Suite::Verbalizer, Suite::Rs];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Strategy => "strategy",
            Suite::Verbalizer => "verbalizer",
            Suite::Rs => "rs",
        }
    }

    pub fn cells(self) -> Vec<Cell> {
        let cell = |name: String, kv: &[(&str, &str)]| Cell {
            name,
            settings: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        match self {
            Suite::Ops => [
                ("ce", "none"),
                ("ce", "ce"),
                ("ce", "kld"),
                ("l2", "kld"),
                ("kld", "none"),
                ("kld", "ce"),
                ("kld", "kld"),
                ("none", "kld"),
            ]
            .iter()
            .map(|(il, ll)| cell(format!("ops:{il}/{ll}"), &[("il_op", il), ("ll_op", ll)]))
            .collect(),
            Suite::Strategy => {
                let toggles = |sr: &'static str, op: &'static str, at: &'static str| {
                    [("strategy", "algorithm1"), ("use_search_range", sr), ("use_order_preservation", op), ("use_adaptive_temperature", at)]
                };
                vec![
                    cell("strategy:random_index".into(), &[("strategy", "random_index")]),
                    cell("strategy:bottom_1".into(), &[("strategy", "bottom_k"), ("k", "1")]),
                    cell("strategy:bottom_3".into(), &[("strategy", "bottom_k"), ("k", "3")]),
                    cell("strategy:multinomial".into(), &toggles("false", "false", "false")),
                    cell("strategy:+search_range".into(), &toggles("true", "false", "false")),
                    cell("strategy:+order_preservation".into(), &toggles("true", "true", "false")),
                    cell("strategy:+adaptive_temperature".into(), &toggles("true", "true", "true")),
                ]
            }
            Suite::Verbalizer => VerbalizerArch::ALL
                .iter()
                .map(|a| cell(format!("verbalizer:{a}"), &[("verbalizer_arch", a.name())]))
                .collect(),
            Suite::Rs => vec![
                cell("rs:off".into(), &[("route", "interact_only")]),
                cell("rs:50%".into(), &[("route", "full"), ("rs_fraction", "0.5")]),
                cell("rs:100%".into(), &[("route", "full"), ("rs_fraction", "1.0")]),
                cell("rs:only".into(), &[("route", "reinforce_only")]),
            ],
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}; valid: ops, strategy, verbalizer, rs")))
    }
}

/// One configuration of the grid: settings applied on top of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub settings: Vec<(String, String)>,
}

impl Cell {
    fn join(&self, other: &Cell) -> Cell {
        let name = match (self.name.is_empty(), other.name.is_empty()) {
            (true, _) => other.name.clone(),
            (_, true) => self.name.clone(),
            _ => format!("{} {}", self.name, other.name),
        };
        Cell { name, settings: self.settings.iter().chain(&other.settings).cloned().collect() }
    }

    /// `key=value;key=value`, the form stored in the CSV.
    pub fn echo(&self) -> String {
        self.settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    /// Route and config of this cell for one seed.
    pub fn resolve(&self, base: &PipelineConfig, seed: u64) -> Result<(PipelineConfig, StudentRoute)> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut route = StudentRoute::Full;
        for (k, v) in &self.settings {
            if k == "route" {
                route = v.parse()?;
            } else {
                cfg = cfg.set(k, v)?;
            }
        }
        cfg.validate().map_err(|e| Error::Config(format!("cell {}: {e}", self.name)))?;
        Ok((cfg, route))
    }
}

/// Parsed grid file:
///
/// ```toml
/// seeds = [0, 1, 2]
/// suites = ["ops", "strategy"]      # optional
/// [axes]                            # optional cartesian product
/// ll_weight = [0.5, 1.0]
/// [fixed]                           # optional, applied to every cell
/// interact_steps = 200
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

fn valid_cell_keys() -> Vec<String> {
    let mut keys = PipelineConfig::keys();
    keys.push("route".into());
    keys.sort();
    keys
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn check_key(key: &str) -> Result<()> {
    if key == "seed" {
        return Err(Error::Config("set seeds with the top-level `seeds` list".into()));
    }
    if !valid_cell_keys().iter().any(|k| k == key) {
        return Err(Error::Config(format!("unknown grid key {key:?}; valid keys: {}", valid_cell_keys().join(", "))));
    }
    Ok(())
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        const TOP: [&str; 4] = ["seeds", "suites", "axes", "fixed"];
        if let Some(bad) = table.keys().find(|k| !TOP.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown grid key {bad:?}; valid keys: {}", TOP.join(", "))));
        }
        let seeds: Vec<u64> = match table.get("seeds") {
            None => vec![0],
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|_| Error::Config("`seeds` must be a list of nonnegative integers".into()))?,
        };
        if seeds.is_empty() {
            return Err(Error::Config("`seeds` is empty".into()));
        }
        let mut cells = vec![Cell { name: String::new(), settings: Vec::new() }];
        if let Some(v) = table.get("suites") {
            let names: Vec<String> =
                v.clone().try_into().map_err(|_| Error::Config("`suites` must be a list of names".into()))?;
            let suite_cells: Vec<Cell> = names
                .iter()
                .map(|n| n.parse::<Suite>().map(Suite::cells))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            cells = suite_cells;
        }
        if let Some(axes) = table.get("axes") {
            let axes = axes.as_table().ok_or_else(|| Error::Config("`axes` must be a table".into()))?;
            for (key, values) in axes {
                check_key(key)?;
                let values = values
                    .as_array()
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| Error::Config(format!("axis {key:?} must be a nonempty list")))?;
                cells = cells
                    .iter()
                    .flat_map(|c| {
                        values.iter().map(move |v| {
                            let val = value_text(v);
                            c.join(&Cell { name: format!("{key}={val}"), settings: vec![(key.clone(), val)] })
                        })
                    })
                    .collect();
            }
        }
        if let Some(fixed) = table.get("fixed") {
            let fixed = fixed.as_table().ok_or_else(|| Error::Config("`fixed` must be a table".into()))?;
            let mut extra = Vec::new();
            for (key, v) in fixed {
                check_key(key)?;
                extra.push((key.clone(), value_text(v)));
            }
            for c in &mut cells {
                let mut settings = extra.clone();
                settings.extend(c.settings.drain(..));
                c.settings = settings;
            }
        }
        for c in &mut cells {
            if c.name.is_empty() {
                c.name = "base".into();
            }
        }
        Ok(AblationGrid { seeds, cells })
    }

    pub fn rows(&self) -> usize {
        self.seeds.len() * self.cells.len()
    }
}

/// One CSV row: a (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row_id: String,
    pub cell: String,
    pub seed: u64,
    pub settings: String,
    pub route: String,
    pub il_op: String,
    pub ll_op: String,
    pub strategy: String,
    pub k: usize,
    pub use_search_range: bool,
    pub use_order_preservation: bool,
    pub use_adaptive_temperature: bool,
    pub verbalizer_arch: String,
    pub rs_fraction: f64,
    pub teacher_exact_match: f64,
    pub test_exact_match: f64,
    pub teacher_params: usize,
    pub student_params: usize,
    /// Parameters of one student verbalizer of the cell's architecture.
    pub verbalizer_params: usize,
}

/// Reads a CSV written by [`cmd_ablate`].
pub fn load_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })
        })
        .collect()
}

/// Teacher-side artifacts shared by every cell with the same teacher settings.
struct TeacherCache {
    key: String,
    teacher: Transformer<f32>,
    teacher_em: f64,
    verbs: BTreeMap<String, Vec<Verbalizer<f32>>>,
}

/// The config with every student-side setting reset, identifying the teacher.
fn teacher_key(cfg: &PipelineConfig) -> String {
    let base = PipelineConfig::default();
    let mut t = cfg.clone();
    t.student_layers = base.student_layers;
    t.student_d_model = base.student_d_model;
    t.student_heads = base.student_heads;
    t.student_taps = base.student_taps.clone();
    t.verbalizer_arch = base.verbalizer_arch;
    t.epsilon = base.epsilon;
    t.scale = base.scale;
    t.il_op = base.il_op;
    t.ll_op = base.ll_op;
    t.ll_weight = base.ll_weight;
    t.strategy = base.strategy;
    t.k = base.k;
    t.use_search_range = base.use_search_range;
    t.use_order_preservation = base.use_order_preservation;
    t.use_adaptive_temperature = base.use_adaptive_temperature;
    t.fixed_temperature = base.fixed_temperature;
    t.kld_direction = base.kld_direction;
    t.train_student_verbalizers = base.train_student_verbalizers;
    t.rs_fraction = base.rs_fraction;
    t.verbalize_steps = base.verbalize_steps;
    t.verbalize_lr_max = base.verbalize_lr_max;
    t.verbalize_lr_min = base.verbalize_lr_min;
    t.interact_steps = base.interact_steps;
    t.interact_lr_max = base.interact_lr_max;
    t.interact_lr_min = base.interact_lr_min;
    t.reinforce_steps = base.reinforce_steps;
    t.reinforce_lr_max = base.reinforce_lr_max;
    t.reinforce_lr_min = base.reinforce_lr_min;
    t.to_toml()
}

fn verbalizer_key(cfg: &PipelineConfig) -> String {
    format!("{}|{}|{}|{}", cfg.verbalizer_arch, cfg.verbalize_steps, cfg.verbalize_lr_max, cfg.verbalize_lr_min)
}

fn run_cell(cfg: &PipelineConfig, route: StudentRoute, cache: &mut Option<TeacherCache>) -> Result<(f64, f64, usize)> {
    let p = Pipeline::new(cfg.clone())?;
    let key = teacher_key(cfg);
    if cache.as_ref().map(|c| c.key != key).unwrap_or(true) {
        let (teacher, _) = p.train_teacher()?;
        let teacher_em = p.evaluate(&teacher, &[])?.exact_match;
        *cache = Some(TeacherCache { key, teacher, teacher_em, verbs: BTreeMap::new() });
    }
    let c = cache.as_mut().expect("teacher cached");
    let vkey = verbalizer_key(cfg);
    if route != StudentRoute::ReinforceOnly && !c.verbs.contains_key(&vkey) {
        let (verbs, _) = p.verbalize(&c.teacher, &cfg.teacher_tap_set()?, "teacher")?;
        c.verbs.insert(vkey.clone(), verbs);
    }
    let verbs = c.verbs.get(&vkey).map(|v| v.as_slice()).unwrap_or(&[]);
    let outcome = p.run_student(&c.teacher, verbs, route)?;
    let test = evaluate(&outcome.student, &[], &p.splits.test, cfg.eval_batch)?.exact_match;
    Ok((c.teacher_em, test, c.teacher.count_parameters()))
}

/// Runs every (cell, seed) not already present in `csv_path`, appending one
/// row per run. Returns all rows of the file afterwards.
pub fn cmd_ablate(base: &PipelineConfig, grid: &AblationGrid, csv_path: &Path, out: &mut impl Write) -> Result<Vec<AblationRow>> {
    // resolve every cell up front so a bad grid fails before any training
    for cell in &grid.cells {
        cell.resolve(base, grid.seeds[0])?;
    }
    let mut rows = if csv_path.exists() { load_ablation_csv(csv_path)? } else { Vec::new() };
    let done: HashSet<String> = rows.iter().map(|r| r.row_id.clone()).collect();
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let fresh = !csv_path.exists() || rows.is_empty();
    let file = fs::OpenOptions::new().create(true).append(true).open(csv_path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for &seed in &grid.seeds {
        let mut cache = None;
        for cell in &grid.cells {
            let row_id = format!("{}#{seed}", cell.name);
            if done.contains(&row_id) {
                writeln!(out, "skip {row_id} (already in {})", csv_path.display())?;
                continue;
            }
            let (cfg, route) = cell.resolve(base, seed)?;
            let (teacher_em, test_em, teacher_params) = run_cell(&cfg, route, &mut cache)?;
            let row = AblationRow {
                row_id: row_id.clone(),
                cell: cell.name.clone(),
                seed,
                settings: cell.echo(),
                route: route.name().into(),
                il_op: cfg.il_op.to_string(),
                ll_op: cfg.ll_op.to_string(),
                strategy: cfg.strategy.to_string(),
                k: cfg.k,
                use_search_range: cfg.use_search_range,
                use_order_preservation: cfg.use_order_preservation,
                use_adaptive_temperature: cfg.use_adaptive_temperature,
                verbalizer_arch: cfg.verbalizer_arch.to_string(),
                rs_fraction: cfg.rs_fraction,
                teacher_exact_match: teacher_em,
                test_exact_match: test_em,
                teacher_params,
                student_params: cfg.student_model().parameter_count(),
                verbalizer_params: cfg.verbalizer_arch.parameter_count(cfg.student_d_model),
            };
            w.serialize(&row).map_err(|e| Error::Internal(e.to_string()))?;
            w.flush()?;
            writeln!(out, "{row_id}: test exact-match {test_em:.4}")?;
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_have_the_table_sizes() {
        assert_eq!(Suite::Ops.cells().len(), 8);
        assert_eq!(Suite::Strategy.cells().len(), 7);
        assert_eq!(Suite::Verbalizer.cells().len(), 8);
        assert_eq!(Suite::Rs.cells().len(), 4);
        let ops: HashSet<String> = Suite::Ops.cells().iter().map(Cell::echo).collect();
        assert_eq!(ops.len(), 8);
    }

    #[test]
    fn axes_multiply_and_seeds_repeat() {
        let g = AblationGrid::parse("seeds = [0, 1, 2]\n[axes]\nil_op = [\"kld\", \"ce\"]\n").unwrap();
        assert_eq!(g.cells.len(), 2);
        assert_eq!(g.rows(), 6);
        assert_eq!(g.cells[1].name, "il_op=ce");
        let g = AblationGrid::parse("suites = [\"rs\"]\n[axes]\nll_weight = [0.5, 1.0]\n[fixed]\nk = 2\n").unwrap();
        assert_eq!(g.cells.len(), 8);
        assert_eq!(g.cells[0].settings[0], ("k".to_string(), "2".to_string()));
        assert_eq!(g.cells[0].name, "rs:off ll_weight=0.5");
        assert_eq!(AblationGrid::parse("").unwrap().cells[0].name, "base");
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let e = AblationGrid::parse("[axes]\nlearning_rate = [1]\n").unwrap_err().to_string();
        assert!(e.contains("unknown grid key \"learning_rate\"") && e.contains("il_op") && e.contains("route"), "{e}");
        let e = AblationGrid::parse("seedz = [1]\n").unwrap_err().to_string();
        assert!(e.contains("seeds, suites, axes, fixed"), "{e}");
        assert!(AblationGrid::parse("suites = [\"tables\"]\n").is_err());
        assert!(AblationGrid::parse("[fixed]\nseed = 3\n").is_err());
    }

    #[test]
    fn cells_resolve_routes_and_reject_bad_values() {
        let base = PipelineConfig::toy();
        let rs = Suite::Rs.cells();
        assert_eq!(rs[0].resolve(&base, 4).unwrap().1, StudentRoute::InteractOnly);
        let (cfg, route) = rs[1].resolve(&base, 4).unwrap();
        assert_eq!((cfg.seed, cfg.rs_fraction, route), (4, 0.5, StudentRoute::Full));
        let bad = Cell { name: "x".into(), settings: vec![("route".into(), "sideways".into())] };
        assert!(bad.resolve(&base, 0).is_err());
        let bad = Cell { name: "x".into(), settings: vec![("use_search_range".into(), "false".into())] };
        assert!(bad.resolve(&base, 0).is_err());
    }

    #[test]
    fn teacher_key_ignores_student_settings() {
        let a = PipelineConfig::toy();
        let b = a.set("il_op", "ce").unwrap().set("verbalizer_arch", "mlp").unwrap();
        assert_eq!(teacher_key(&a), teacher_key(&b));
        assert_ne!(teacher_key(&a), teacher_key(&a.set("teacher_steps", "7").unwrap()));
    }
}
