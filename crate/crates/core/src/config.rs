//! Run configuration: a small sectioned `key = value` format.
//!
//! ```text
//! seed = 0
//! [fom]
//! n_x = 201          # comments run to end of line
//! mu_min = [0.7, 0.9]
//! [loss]
//! beta2 = 0.1
//! ```
//!
//! Keys may also be written fully qualified (`loss.beta2 = 0.1`) outside
//! any section. Every key has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{make_parameter_grid, ParameterGrid};
use toml_edit::{Document, Item, Table, Value};

use crate::dynamics::{build_test_functions, default_test_function_shape, LibrarySpec};
use crate::error::{LasdiError, Result};
use crate::fom::BurgersConfig;
use crate::greedy::{Sampler, TrainConfig};
use crate::interp::{GpOptions, InterpConfig, InterpKind};
use crate::loss::{DynamicsMode, LossSettings, LossWeights, ZdotSource};
use crate::nn::Activation;

/// File locations used by the command-line tools.
#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub data: PathBuf,
    pub model: PathBuf,
    pub log: PathBuf,
    pub out: PathBuf,
    pub checkpoints: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data.lsdi".into(),
            model: "model.lsdm".into(),
            log: "train_log.csv".into(),
            out: ".".into(),
            checkpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub fom: BurgersConfig,
    pub mu_min: Vec<f64>,
    pub mu_max: Vec<f64>,
    /// Initial training grid; `[2, 2]` is the four corners.
    pub train_grid: Vec<usize>,
    /// Candidate grid for greedy sampling and the evaluation grid.
    pub test_grid: Vec<usize>,
    /// Encoder layer sizes, state size first, latent size last.
    pub ae_layers: Vec<usize>,
    pub activation: Activation,
    pub normalize: bool,
    pub weights: LossWeights,
    pub epochs: usize,
    pub lr: f64,
    pub init_ridge: f64,
    pub mode: DynamicsMode,
    pub zdot: ZdotSource,
    pub library: LibrarySpec,
    pub n_test_functions: Option<usize>,
    pub half_width: Option<usize>,
    pub test_order: u32,
    pub interp: InterpConfig,
    pub sampler: Sampler,
    pub n_up: usize,
    pub budget: usize,
    pub n_samples: usize,
    pub n_ts: Option<usize>,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            fom: BurgersConfig::default(),
            mu_min: vec![0.7, 0.9],
            mu_max: vec![0.9, 1.1],
            train_grid: vec![2, 2],
            test_grid: vec![5, 5],
            ae_layers: vec![1001, 100, 5],
            activation: t.activation,
            normalize: t.normalize,
            weights: t.loss.weights,
            epochs: t.n_epochs,
            lr: t.lr,
            init_ridge: t.init_ridge,
            mode: t.loss.mode,
            zdot: t.loss.zdot,
            library: t.loss.library,
            n_test_functions: None,
            half_width: None,
            test_order: 7,
            interp: t.interp,
            sampler: t.sampler,
            n_up: t.n_up,
            budget: t.budget,
            n_samples: t.n_samples,
            n_ts: t.n_ts,
            paths: Paths::default(),
        }
    }
}

fn cfg_err(key: &str, line: usize, message: impl Into<String>) -> LasdiError {
    LasdiError::Config {
        key: key.to_string(),
        line,
        message: message.into(),
    }
}

/// Line (1-based) containing byte offset `pos`.
fn line_of(text: &str, pos: usize) -> usize {
    text[..pos.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => toml_string(s.value()),
        Value::Integer(i) => i.value().to_string(),
        Value::Float(f) => f.value().to_string(),
        Value::Boolean(b) => b.value().to_string(),
        Value::Datetime(_) => "a date".into(),
        Value::Array(_) => "a list".into(),
        Value::InlineTable(_) => "a table".into(),
    }
}

/// A TOML basic string literal.
fn toml_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct Entry<'a> {
    key: &'a str,
    value: &'a Value,
    line: usize,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> LasdiError {
        cfg_err(self.key, self.line, message)
    }

    fn shown(&self) -> String {
        describe(self.value)
    }

    fn num(v: &Value) -> Option<f64> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }

    fn f64(&self) -> Result<f64> {
        let x = Self::num(self.value).ok_or_else(|| self.err(format!("expected a number, got {}", self.shown())))?;
        if !x.is_finite() {
            return Err(self.err("value must be finite"));
        }
        Ok(x)
    }

    fn positive(&self) -> Result<f64> {
        let x = self.f64()?;
        if x <= 0.0 {
            return Err(self.err(format!("must be positive, got {x}")));
        }
        Ok(x)
    }

    fn nonneg(&self) -> Result<f64> {
        let x = self.f64()?;
        if x < 0.0 {
            return Err(self.err(format!("must be nonnegative, got {x}")));
        }
        Ok(x)
    }

    fn usize(&self) -> Result<usize> {
        self.value
            .as_integer()
            .and_then(|i| usize::try_from(i).ok())
            .ok_or_else(|| self.err(format!("expected a nonnegative integer, got {}", self.shown())))
    }

    fn count(&self) -> Result<usize> {
        let n = self.usize()?;
        if n == 0 {
            return Err(self.err("must be at least 1"));
        }
        Ok(n)
    }

    fn is_auto(&self) -> bool {
        self.value.as_str() == Some("auto")
    }

    fn auto_count(&self) -> Result<Option<usize>> {
        if self.is_auto() {
            Ok(None)
        } else {
            self.count().map(Some)
        }
    }

    fn bool(&self) -> Result<bool> {
        self.value
            .as_bool()
            .ok_or_else(|| self.err(format!("expected true or false, got {}", self.shown())))
    }

    fn list(&self) -> Result<Vec<&Value>> {
        self.value
            .as_array()
            .map(|a| a.iter().collect())
            .ok_or_else(|| self.err(format!("expected a list like [a, b], got {}", self.shown())))
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.list()?
            .into_iter()
            .map(|v| match Self::num(v) {
                Some(x) if x.is_finite() => Ok(x),
                _ => Err(self.err(format!("expected a number in the list, got {}", describe(v)))),
            })
            .collect()
    }

    fn count_list(&self) -> Result<Vec<usize>> {
        let v: Vec<usize> = self
            .list()?
            .into_iter()
            .map(|v| {
                v.as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| self.err(format!("expected an integer in the list, got {}", describe(v))))
            })
            .collect::<Result<_>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err(self.err("list must be nonempty with positive entries"));
        }
        Ok(v)
    }

    fn str(&self) -> Result<&str> {
        self.value
            .as_str()
            .ok_or_else(|| self.err(format!("expected a string, got {}", self.shown())))
    }

    fn choice<T>(&self, parse: impl Fn(&str) -> Option<T>, options: &str) -> Result<T> {
        let v = self.str()?;
        parse(v).ok_or_else(|| self.err(format!("expected one of {options}, got `{v}`")))
    }

    fn path(&self) -> Result<PathBuf> {
        self.str().map(PathBuf::from)
    }
}

/// A leaf of the document: dotted key, value (None for arrays of
/// tables), and byte span.
type Leaf<'a> = (String, Option<&'a Value>, Option<std::ops::Range<usize>>);

fn dotted(prefix: &str, k: &str) -> String {
    if prefix.is_empty() {
        k.to_string()
    } else {
        format!("{prefix}.{k}")
    }
}

fn collect_value<'a>(key: String, v: &'a Value, out: &mut Vec<Leaf<'a>>) {
    match v.as_inline_table() {
        Some(t) => t.iter().for_each(|(k, iv)| collect_value(dotted(&key, k), iv, out)),
        None => out.push((key, Some(v), v.span())),
    }
}

/// Flattens nested tables into dotted keys.
fn collect_leaves<'a>(table: &'a Table, prefix: &str, out: &mut Vec<Leaf<'a>>) {
    for (k, item) in table.iter() {
        let key = dotted(prefix, k);
        match item {
            Item::Table(t) => collect_leaves(t, &key, out),
            Item::Value(v) => collect_value(key, v, out),
            _ => out.push((key, None, item.span())),
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "fom.x_min",
    "fom.x_max",
    "fom.n_x",
    "fom.dt",
    "fom.t_max",
    "fom.newton_tol",
    "fom.newton_max_iter",
    "fom.mu_min",
    "fom.mu_max",
    "fom.train_grid",
    "fom.test_grid",
    "ae.layers",
    "ae.activation",
    "ae.normalize",
    "loss.beta1",
    "loss.beta2",
    "loss.beta3",
    "loss.beta4",
    "train.epochs",
    "train.lr",
    "train.init_ridge",
    "dynamics.mode",
    "dynamics.zdot",
    "dynamics.constant",
    "dynamics.degree",
    "dynamics.n_test_functions",
    "dynamics.half_width",
    "dynamics.order",
    "interp.kind",
    "interp.k",
    "interp.epsilon",
    "gp.jitter",
    "gp.restarts",
    "gp.iterations",
    "gp.lr",
    "greedy.sampler",
    "greedy.n_up",
    "greedy.budget",
    "greedy.n_samples",
    "greedy.n_ts",
    "paths.data",
    "paths.model",
    "paths.log",
    "paths.out",
    "paths.checkpoints",
];

impl RunConfig {
    fn set(&mut self, e: &Entry) -> Result<()> {
        match e.key {
            "seed" => self.seed = e.usize()? as u64,
            "fom.x_min" => self.fom.x_min = e.f64()?,
            "fom.x_max" => self.fom.x_max = e.f64()?,
            "fom.n_x" => {
                let n = e.usize()?;
                if n < 3 {
                    return Err(e.err(format!("need at least 3 grid points, got {n}")));
                }
                self.fom.n_x = n;
            }
            "fom.dt" => self.fom.dt = e.positive()?,
            "fom.t_max" => self.fom.t_max = e.positive()?,
            "fom.newton_tol" => self.fom.newton_tol = e.positive()?,
            "fom.newton_max_iter" => self.fom.newton_max_iter = e.count()?,
            "fom.mu_min" => self.mu_min = e.f64_list()?,
            "fom.mu_max" => self.mu_max = e.f64_list()?,
            "fom.train_grid" => self.train_grid = e.count_list()?,
            "fom.test_grid" => self.test_grid = e.count_list()?,
            "ae.layers" => {
                let l = e.count_list()?;
                if l.len() < 2 {
                    return Err(e.err("need at least input and latent sizes"));
                }
                self.ae_layers = l;
            }
            "ae.activation" => self.activation = e.choice(Activation::parse, "sigmoid, softplus, relu, tanh")?,
            "ae.normalize" => self.normalize = e.bool()?,
            "loss.beta1" => self.weights.beta1 = e.nonneg()?,
            "loss.beta2" => self.weights.beta2 = e.nonneg()?,
            "loss.beta3" => self.weights.beta3 = e.nonneg()?,
            "loss.beta4" => self.weights.beta4 = e.nonneg()?,
            "train.epochs" => self.epochs = e.count()?,
            "train.lr" => self.lr = e.positive()?,
            "train.init_ridge" => self.init_ridge = e.nonneg()?,
            "dynamics.mode" => self.mode = e.choice(DynamicsMode::parse, "strong, weak")?,
            "dynamics.zdot" => self.zdot = e.choice(ZdotSource::parse, "fd, chain")?,
            "dynamics.constant" => self.library.include_constant = e.bool()?,
            "dynamics.degree" => {
                let d = e.usize()?;
                if !(1..=2).contains(&d) {
                    return Err(e.err(format!("library degree must be 1 or 2, got {d}")));
                }
                self.library.poly_degree = d as u8;
            }
            "dynamics.n_test_functions" => self.n_test_functions = e.auto_count()?,
            "dynamics.half_width" => self.half_width = e.auto_count()?,
            "dynamics.order" => {
                let p = e.count()?;
                self.test_order = u32::try_from(p).map_err(|_| e.err("order too large"))?;
            }
            "interp.kind" => self.interp.kind = e.choice(InterpKind::parse, "rbf, knn, gp")?,
            "interp.k" => self.interp.k = e.count()?,
            "interp.epsilon" => {
                self.interp.epsilon = if e.is_auto() { None } else { Some(e.positive()?) }
            }
            "gp.jitter" => self.interp.gp.jitter = e.positive()?,
            "gp.restarts" => self.interp.gp.restarts = e.count()?,
            "gp.iterations" => self.interp.gp.iterations = e.usize()?,
            "gp.lr" => self.interp.gp.learning_rate = e.positive()?,
            "greedy.sampler" => self.sampler = e.choice(Sampler::parse, "none, residual, variance")?,
            "greedy.n_up" => self.n_up = e.count()?,
            "greedy.budget" => self.budget = e.usize()?,
            "greedy.n_samples" => {
                let n = e.usize()?;
                if n < 2 {
                    return Err(e.err(format!("need at least 2 samples, got {n}")));
                }
                self.n_samples = n;
            }
            "greedy.n_ts" => self.n_ts = e.auto_count()?,
            "paths.data" => self.paths.data = e.path()?,
            "paths.model" => self.paths.model = e.path()?,
            "paths.log" => self.paths.log = e.path()?,
            "paths.out" => self.paths.out = e.path()?,
            "paths.checkpoints" => {
                self.paths.checkpoints = Some(e.path()?).filter(|p| !p.as_os_str().is_empty());
            }
            _ => return Err(e.err("unknown key")),
        }
        Ok(())
    }

    /// Cross-key constraints. `lines` maps keys to the line that set them.
    fn check(&self, lines: &BTreeMap<String, usize>) -> Result<()> {
        let at = |k: &str| lines.get(k).copied().unwrap_or(0);
        if self.fom.x_min >= self.fom.x_max {
            return Err(cfg_err("fom.x_max", at("fom.x_max"), "must exceed fom.x_min"));
        }
        if self.fom.dt > self.fom.t_max {
            return Err(cfg_err("fom.dt", at("fom.dt"), "must not exceed fom.t_max"));
        }
        let d = self.mu_min.len();
        if d == 0 {
            return Err(cfg_err("fom.mu_min", at("fom.mu_min"), "parameter box needs at least one dimension"));
        }
        if self.mu_max.len() != d {
            return Err(cfg_err("fom.mu_max", at("fom.mu_max"), format!("expected {d} entries like fom.mu_min")));
        }
        if let Some(i) = (0..d).find(|&i| self.mu_min[i] >= self.mu_max[i]) {
            return Err(cfg_err("fom.mu_max", at("fom.mu_max"), format!("entry {i} must exceed fom.mu_min")));
        }
        for (key, g) in [("fom.train_grid", &self.train_grid), ("fom.test_grid", &self.test_grid)] {
            if g.len() != d {
                return Err(cfg_err(key, at(key), format!("expected {d} counts, one per parameter")));
            }
            if g.contains(&1) {
                return Err(cfg_err(key, at(key), "each dimension needs at least 2 points"));
            }
        }
        if self.ae_layers[0] != self.fom.n_x {
            return Err(cfg_err(
                "ae.layers",
                at("ae.layers"),
                format!("first size {} must equal fom.n_x = {}", self.ae_layers[0], self.fom.n_x),
            ));
        }
        if self.weights.validate().is_err() {
            return Err(cfg_err("loss.beta1", at("loss.beta1"), "loss weights are all zero"));
        }
        if self.n_up > self.epochs {
            return Err(cfg_err("greedy.n_up", at("greedy.n_up"), format!("exceeds train.epochs = {}", self.epochs)));
        }
        if self.sampler == Sampler::Variance && self.interp.kind != InterpKind::Gp {
            return Err(cfg_err("greedy.sampler", at("greedy.sampler"), "variance sampling needs interp.kind = gp"));
        }
        let n_t = self.fom.n_steps();
        if let Some(n) = self.n_ts {
            if n > n_t {
                return Err(cfg_err("greedy.n_ts", at("greedy.n_ts"), format!("exceeds the {n_t} time steps")));
            }
        }
        if self.mode == DynamicsMode::Weak {
            let (_, m, _) = default_test_function_shape(n_t);
            if 2 * self.half_width.unwrap_or(m) > n_t {
                return Err(cfg_err("dynamics.half_width", at("dynamics.half_width"), "test functions do not fit in the time window"));
            }
        }
        Ok(())
    }

    /// Parses a TOML document, then applies `overrides` (`key=value`,
    /// where a value that is not valid TOML is taken as a bare string).
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let doc = Document::parse(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            cfg_err("", line, e.message().trim().to_string())
        })?;
        let mut leaves = Vec::new();
        collect_leaves(doc.as_table(), "", &mut leaves);
        let mut cfg = RunConfig::default();
        let mut lines: BTreeMap<String, usize> = BTreeMap::new();
        for (key, value, span) in leaves {
            let line = span.map_or(0, |s| line_of(text, s.start));
            let value = value.ok_or_else(|| cfg_err(&key, line, "unknown key"))?;
            lines.insert(key.clone(), line);
            cfg.set(&Entry { key: &key, value, line })?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| cfg_err(o, 0, "override must look like key=value"))?;
            let key = k.trim();
            let v = v.trim();
            let value = v.parse::<Value>().unwrap_or_else(|_| Value::from(v));
            lines.insert(key.to_string(), 0);
            cfg.set(&Entry { key, value: &value, line: 0 })?;
        }
        cfg.check(&lines)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Serializes every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            format!("[{}]", v.iter().map(T::to_string).collect::<Vec<_>>().join(", "))
        }
        fn auto<T: ToString>(v: Option<T>) -> String {
            v.map_or("\"auto\"".into(), |x| x.to_string())
        }
        let f = &self.fom;
        let w = &self.weights;
        let i = &self.interp;
        let p = &self.paths;
        let quote = toml_string;
        let path = |x: &PathBuf| quote(&x.display().to_string());
        let values: Vec<String> = vec![
            self.seed.to_string(),
            f.x_min.to_string(),
            f.x_max.to_string(),
            f.n_x.to_string(),
            f.dt.to_string(),
            f.t_max.to_string(),
            f.newton_tol.to_string(),
            f.newton_max_iter.to_string(),
            list(&self.mu_min),
            list(&self.mu_max),
            list(&self.train_grid),
            list(&self.test_grid),
            list(&self.ae_layers),
            quote(self.activation.name()),
            self.normalize.to_string(),
            w.beta1.to_string(),
            w.beta2.to_string(),
            w.beta3.to_string(),
            w.beta4.to_string(),
            self.epochs.to_string(),
            self.lr.to_string(),
            self.init_ridge.to_string(),
            quote(self.mode.name()),
            quote(self.zdot.name()),
            self.library.include_constant.to_string(),
            self.library.poly_degree.to_string(),
            auto(self.n_test_functions),
            auto(self.half_width),
            self.test_order.to_string(),
            quote(i.kind.name()),
            i.k.to_string(),
            auto(i.epsilon),
            i.gp.jitter.to_string(),
            i.gp.restarts.to_string(),
            i.gp.iterations.to_string(),
            i.gp.learning_rate.to_string(),
            quote(self.sampler.name()),
            self.n_up.to_string(),
            self.budget.to_string(),
            self.n_samples.to_string(),
            auto(self.n_ts),
            path(&p.data),
            path(&p.model),
            path(&p.log),
            path(&p.out),
            p.checkpoints.as_ref().map_or("\"\"".into(), path),
        ];
        let mut out = String::new();
        let mut section = "";
        for (key, value) in KEYS.iter().zip(values) {
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                let _ = writeln!(out, "\n[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn train_grid(&self) -> Result<ParameterGrid> {
        make_parameter_grid(&self.ranges(), &self.train_grid)
    }

    pub fn test_grid(&self) -> Result<ParameterGrid> {
        make_parameter_grid(&self.ranges(), &self.test_grid)
    }

    fn ranges(&self) -> Vec<(f64, f64)> {
        self.mu_min.iter().copied().zip(self.mu_max.iter().copied()).collect()
    }

    /// Training settings; the weak-form test functions are built for the
    /// FOM time grid.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let n_t = self.fom.n_steps();
        let bank = if self.mode == DynamicsMode::Weak {
            let (n_k, m, _) = default_test_function_shape(n_t);
            Some(build_test_functions(
                n_t,
                self.fom.dt,
                self.n_test_functions.unwrap_or(n_k),
                self.half_width.unwrap_or(m),
                self.test_order,
            )?)
        } else {
            None
        };
        let n = self.ae_layers.len();
        let mut interp = self.interp.clone();
        interp.gp = GpOptions { seed: self.seed, ..interp.gp };
        Ok(TrainConfig {
            n_epochs: self.epochs,
            n_up: self.n_up,
            lr: self.lr,
            seed: self.seed,
            hidden: self.ae_layers[1..n - 1].to_vec(),
            latent_dim: self.ae_layers[n - 1],
            activation: self.activation,
            normalize: self.normalize,
            loss: LossSettings {
                weights: self.weights,
                mode: self.mode,
                zdot: self.zdot,
                library: self.library,
                bank,
            },
            interp,
            sampler: self.sampler,
            budget: self.budget,
            n_samples: self.n_samples,
            n_ts: self.n_ts,
            init_ridge: self.init_ridge,
            checkpoint_dir: self.paths.checkpoints.clone(),
        })
    }
}
