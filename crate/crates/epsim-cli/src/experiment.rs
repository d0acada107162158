//! Experiment configuration: hard defaults, then a named preset, then a flat
//! JSON config file, then command-line flags, each layer overriding the one
//! before. The resolved experiment expands into the (shape x path x
//! schedule x repetition) cell matrix the runner executes.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use epsim_core::SimConfig;

/// Which exchange implementation a cell runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathSel {
    Relayfree,
    Baseline,
}

impl fmt::Display for PathSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathSel::Relayfree => "relayfree",
            PathSel::Baseline => "baseline",
        })
    }
}

/// Which pipeline schedule a cell runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedSel {
    Prefill,
    Decode,
}

impl fmt::Display for SchedSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedSel::Prefill => "prefill",
            SchedSel::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineSel {
    Handshake,
    Cached,
}

impl fmt::Display for CombineSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineSel::Handshake => "handshake",
            CombineSel::Cached => "cached",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecSel {
    Threaded,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutFormat {
    Csv,
    Json,
}

impl OutFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutFormat::Csv => "csv",
            OutFormat::Json => "json",
        }
    }
}

/// How decode sizes its per-expert receive capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityRule {
    /// Worst case: every branch in the world could target one expert.
    WorstCase,
    /// A fixed row count.
    Fixed(usize),
    /// Statistical sizing for uniform routing: ceil(mean + 6*sqrt(mean) + 8)
    /// expected rows per expert, computed per cell.
    Auto,
}

/// One override layer: unset fields fall through to the layer below.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub preset: Option<String>,
    pub ranks: Option<OneOrMany>,
    pub experts: Option<usize>,
    pub tokens: Option<OneOrMany>,
    pub hidden: Option<OneOrMany>,
    pub top_k: Option<OneOrMany>,
    pub seed: Option<u64>,
    pub quant: Option<bool>,
    pub path: Option<String>,
    pub schedule: Option<String>,
    pub combine_mode: Option<String>,
    pub capacity: Option<CapacityKey>,
    pub reps: Option<usize>,
    pub exec: Option<String>,
    pub format: Option<String>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub max_cells: Option<usize>,
}

/// Axis values: a single number or a list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    fn values(&self) -> Vec<usize> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(vs) => vs.clone(),
        }
    }

    /// Parse "8" or "8,16,32".
    pub fn parse_list(s: &str) -> Result<OneOrMany> {
        let vals: Vec<usize> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| anyhow!("`{p}` is not a non-negative integer"))
            })
            .collect::<Result<_>>()?;
        if vals.is_empty() {
            bail!("empty value list");
        }
        Ok(if vals.len() == 1 {
            OneOrMany::One(vals[0])
        } else {
            OneOrMany::Many(vals)
        })
    }
}

/// Capacity: a number or the word "auto".
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CapacityKey {
    Rows(usize),
    Word(String),
}

/// The fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub ranks: Vec<usize>,
    pub experts_total: usize,
    pub tokens: Vec<usize>,
    pub hidden: Vec<usize>,
    pub top_k: Vec<usize>,
    pub seed: u64,
    pub quant: bool,
    pub paths: Vec<PathSel>,
    pub schedules: Vec<SchedSel>,
    pub combine_mode: CombineSel,
    pub capacity: CapacityRule,
    pub reps: usize,
    pub exec: ExecSel,
    pub format: OutFormat,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub max_cells: usize,
    /// True while the shape is exactly the hand-worked instance via the
    /// `ex1` preset; any shape override switches back to generated inputs.
    pub pinned_workload: bool,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            ranks: vec![2],
            experts_total: 4,
            tokens: vec![8],
            hidden: vec![16],
            top_k: vec![2],
            seed: 42,
            quant: false,
            paths: vec![PathSel::Relayfree],
            schedules: vec![SchedSel::Prefill],
            combine_mode: CombineSel::Handshake,
            capacity: CapacityRule::WorstCase,
            reps: 1,
            exec: ExecSel::Threaded,
            format: OutFormat::Csv,
            out: None,
            out_dir: None,
            max_cells: 4096,
            pinned_workload: false,
        }
    }
}

pub fn preset_patch(name: &str) -> Result<Patch> {
    let mut p = Patch::default();
    match name {
        "ex1" => {
            p.ranks = Some(OneOrMany::One(2));
            p.experts = Some(4);
            p.tokens = Some(OneOrMany::One(2));
            p.hidden = Some(OneOrMany::One(4));
            p.top_k = Some(OneOrMany::One(2));
            p.seed = Some(0);
        }
        "small" => {
            p.ranks = Some(OneOrMany::One(4));
            p.experts = Some(16);
            p.tokens = Some(OneOrMany::One(32));
            p.hidden = Some(OneOrMany::One(64));
            p.top_k = Some(OneOrMany::One(4));
        }
        "paper-shape" => {
            p.ranks = Some(OneOrMany::One(8));
            p.experts = Some(64);
            p.top_k = Some(OneOrMany::One(8));
            p.hidden = Some(OneOrMany::Many(vec![4096, 7168]));
            p.tokens = Some(OneOrMany::Many(vec![16, 32, 64, 80, 128, 144]));
            p.path = Some("relayfree".into());
            p.schedule = Some("decode".into());
            p.capacity = Some(CapacityKey::Word("auto".into()));
        }
        other => bail!("unknown preset `{other}` (expected ex1, small, or paper-shape)"),
    }
    Ok(p)
}

fn parse_paths(s: &str) -> Result<Vec<PathSel>> {
    Ok(match s {
        "relayfree" => vec![PathSel::Relayfree],
        "baseline" => vec![PathSel::Baseline],
        "both" => vec![PathSel::Relayfree, PathSel::Baseline],
        other => bail!("path must be relayfree, baseline, or both (got `{other}`)"),
    })
}

fn parse_schedules(s: &str) -> Result<Vec<SchedSel>> {
    Ok(match s {
        "prefill" => vec![SchedSel::Prefill],
        "decode" => vec![SchedSel::Decode],
        "both" => vec![SchedSel::Prefill, SchedSel::Decode],
        other => bail!("schedule must be prefill, decode, or both (got `{other}`)"),
    })
}

fn parse_combine(s: &str) -> Result<CombineSel> {
    Ok(match s {
        "handshake" => CombineSel::Handshake,
        "cached" => CombineSel::Cached,
        other => bail!("combine_mode must be handshake or cached (got `{other}`)"),
    })
}

fn parse_exec(s: &str) -> Result<ExecSel> {
    Ok(match s {
        "threaded" => ExecSel::Threaded,
        "roundrobin" => ExecSel::RoundRobin,
        other => bail!("exec must be threaded or roundrobin (got `{other}`)"),
    })
}

fn parse_format(s: &str) -> Result<OutFormat> {
    Ok(match s {
        "csv" => OutFormat::Csv,
        "json" => OutFormat::Json,
        other => bail!("format must be csv or json (got `{other}`)"),
    })
}

fn parse_capacity(key: &CapacityKey) -> Result<CapacityRule> {
    Ok(match key {
        CapacityKey::Rows(n) => CapacityRule::Fixed(*n),
        CapacityKey::Word(w) if w == "auto" => CapacityRule::Auto,
        CapacityKey::Word(w) => bail!("capacity must be a row count or `auto` (got `{w}`)"),
    })
}

impl Experiment {
    /// Apply one override layer. A `preset` key inside the patch expands
    /// first, so the patch's own keys override the preset's.
    pub fn apply(&mut self, patch: &Patch) -> Result<()> {
        if let Some(name) = &patch.preset {
            let expanded = preset_patch(name)?;
            self.apply(&expanded)?;
            self.pinned_workload = name == "ex1";
        }
        let shape_before = (
            self.ranks.clone(),
            self.experts_total,
            self.tokens.clone(),
            self.hidden.clone(),
            self.top_k.clone(),
            self.seed,
        );
        if let Some(v) = &patch.ranks {
            self.ranks = v.values();
        }
        if let Some(v) = patch.experts {
            self.experts_total = v;
        }
        if let Some(v) = &patch.tokens {
            self.tokens = v.values();
        }
        if let Some(v) = &patch.hidden {
            self.hidden = v.values();
        }
        if let Some(v) = &patch.top_k {
            self.top_k = v.values();
        }
        if let Some(v) = patch.seed {
            self.seed = v;
        }
        let shape_after = (
            self.ranks.clone(),
            self.experts_total,
            self.tokens.clone(),
            self.hidden.clone(),
            self.top_k.clone(),
            self.seed,
        );
        if shape_after != shape_before {
            self.pinned_workload = false;
        }
        if let Some(v) = patch.quant {
            self.quant = v;
        }
        if let Some(s) = &patch.path {
            self.paths = parse_paths(s)?;
        }
        if let Some(s) = &patch.schedule {
            self.schedules = parse_schedules(s)?;
        }
        if let Some(s) = &patch.combine_mode {
            self.combine_mode = parse_combine(s)?;
        }
        if let Some(k) = &patch.capacity {
            self.capacity = parse_capacity(k)?;
        }
        if let Some(v) = patch.reps {
            self.reps = v;
        }
        if let Some(s) = &patch.exec {
            self.exec = parse_exec(s)?;
        }
        if let Some(s) = &patch.format {
            self.format = parse_format(s)?;
        }
        if let Some(p) = &patch.out {
            self.out = Some(p.clone());
        }
        if let Some(p) = &patch.out_dir {
            self.out_dir = Some(p.clone());
        }
        if let Some(v) = patch.max_cells {
            self.max_cells = v;
        }
        Ok(())
    }

    /// Load a flat JSON config file as a patch.
    pub fn load_file(path: &Path) -> Result<Patch> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let patch: Patch = serde_json::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(patch)
    }
}

/// One executable cell of the matrix.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub cfg: SimConfig,
    pub path: PathSel,
    pub sched: SchedSel,
    pub combine_mode: CombineSel,
    pub capacity: Option<usize>,
    pub exec: ExecSel,
    /// Use the fixed hand-worked inputs instead of seeded generation.
    pub pinned_workload: bool,
}

/// Statistical capacity for uniform routing at this shape.
pub fn auto_capacity(cfg: &SimConfig) -> usize {
    let mean = (cfg.num_ranks * cfg.tokens_per_rank * cfg.top_k) as f64
        / cfg.num_experts() as f64;
    (mean + 6.0 * mean.sqrt() + 8.0).ceil() as usize
}

/// Expand the experiment into its cell matrix. `single_shape` (the `run`
/// subcommand) rejects axis lists; `sweep` accepts them.
pub fn expand_cells(exp: &Experiment, single_shape: bool) -> Result<Vec<CellSpec>> {
    if single_shape {
        for (name, len) in [
            ("ranks", exp.ranks.len()),
            ("tokens", exp.tokens.len()),
            ("hidden", exp.hidden.len()),
            ("top_k", exp.top_k.len()),
        ] {
            if len != 1 {
                bail!("`run` takes a single {name} value; use `sweep` for lists");
            }
        }
    }
    if exp.paths == [PathSel::Baseline] && exp.schedules == [SchedSel::Decode] {
        bail!(
            "the staged baseline models the two-stage relay pipeline only and cannot run \
             the compact schedule"
        );
    }
    if exp.reps == 0 {
        bail!("reps must be >= 1");
    }

    let mut cells = Vec::new();
    for &r in &exp.ranks {
        if r == 0 {
            bail!("ranks must be >= 1");
        }
        if exp.experts_total % r != 0 {
            bail!(
                "experts ({}) must divide evenly across ranks ({r})",
                exp.experts_total
            );
        }
        for &t in &exp.tokens {
            for &h in &exp.hidden {
                for &k in &exp.top_k {
                    for (path, sched) in matrix_pairs(exp) {
                        for rep in 0..exp.reps {
                            // Repetitions vary the seed so they record fresh
                            // instances; the pinned hand-worked inputs keep
                            // their defining seed.
                            let seed = if exp.pinned_workload {
                                exp.seed
                            } else {
                                exp.seed + rep as u64
                            };
                            let mut cfg =
                                SimConfig::new(r, exp.experts_total / r, t, h, k, seed);
                            cfg.quant_enabled = exp.quant;
                            cfg.validate().map_err(|e| anyhow!("{e}"))?;
                            let capacity = match exp.capacity {
                                CapacityRule::WorstCase => None,
                                CapacityRule::Fixed(n) => Some(n),
                                CapacityRule::Auto => Some(auto_capacity(&cfg)),
                            };
                            cells.push(CellSpec {
                                cfg,
                                path,
                                sched,
                                combine_mode: exp.combine_mode,
                                capacity,
                                exec: exp.exec,
                                pinned_workload: exp.pinned_workload,
                            });
                        }
                    }
                }
            }
        }
    }
    if cells.len() > exp.max_cells {
        bail!(
            "matrix has {} cells, above the cap of {} (raise max_cells to allow this)",
            cells.len(),
            exp.max_cells
        );
    }
    Ok(cells)
}

/// Valid (path, schedule) pairs: the staged baseline only has a two-stage
/// form, so its compact-schedule cell is skipped when expanding `both`.
fn matrix_pairs(exp: &Experiment) -> Vec<(PathSel, SchedSel)> {
    let mut pairs = Vec::new();
    for &p in &exp.paths {
        for &s in &exp.schedules {
            if p == PathSel::Baseline && s == SchedSel::Decode {
                continue;
            }
            pairs.push((p, s));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_override_in_order() {
        let mut exp = Experiment::default();
        exp.apply(&preset_patch("small").unwrap()).unwrap();
        assert_eq!(exp.ranks, vec![4]);
        assert_eq!(exp.experts_total, 16);
        let mut flags = Patch::default();
        flags.ranks = Some(OneOrMany::One(2));
        flags.quant = Some(true);
        exp.apply(&flags).unwrap();
        assert_eq!(exp.ranks, vec![2]);
        assert_eq!(exp.experts_total, 16);
        assert!(exp.quant);
    }

    #[test]
    fn preset_key_inside_a_patch_expands_first() {
        let mut exp = Experiment::default();
        let patch: Patch =
            serde_json::from_str(r#"{"preset": "small", "tokens": 8}"#).unwrap();
        exp.apply(&patch).unwrap();
        assert_eq!(exp.experts_total, 16);
        assert_eq!(exp.tokens, vec![8]);
    }

    #[test]
    fn ex1_preset_pins_the_workload_until_overridden() {
        let mut exp = Experiment::default();
        let patch: Patch = serde_json::from_str(r#"{"preset": "ex1"}"#).unwrap();
        exp.apply(&patch).unwrap();
        assert!(exp.pinned_workload);
        let mut exp2 = Experiment::default();
        let patch2: Patch =
            serde_json::from_str(r#"{"preset": "ex1", "tokens": 4}"#).unwrap();
        exp2.apply(&patch2).unwrap();
        assert!(!exp2.pinned_workload);
    }

    #[test]
    fn indivisible_expert_count_is_rejected() {
        let mut exp = Experiment::default();
        let mut p = Patch::default();
        p.ranks = Some(OneOrMany::One(3));
        p.experts = Some(4);
        exp.apply(&p).unwrap();
        let err = expand_cells(&exp, true).unwrap_err();
        assert!(err.to_string().contains("divide"), "{err}");
    }

    #[test]
    fn baseline_decode_is_rejected_but_both_skips_the_cell() {
        let mut exp = Experiment::default();
        let mut p = Patch::default();
        p.path = Some("baseline".into());
        p.schedule = Some("decode".into());
        exp.apply(&p).unwrap();
        assert!(expand_cells(&exp, true).is_err());

        let mut exp2 = Experiment::default();
        let mut p2 = Patch::default();
        p2.path = Some("both".into());
        p2.schedule = Some("both".into());
        exp2.apply(&p2).unwrap();
        let cells = expand_cells(&exp2, true).unwrap();
        assert_eq!(cells.len(), 3);
        assert!(!cells
            .iter()
            .any(|c| c.path == PathSel::Baseline && c.sched == SchedSel::Decode));
    }

    #[test]
    fn sweep_cardinality_and_cap() {
        let mut exp = Experiment::default();
        let mut p = Patch::default();
        p.tokens = Some(OneOrMany::Many(vec![8, 16]));
        p.path = Some("both".into());
        exp.apply(&p).unwrap();
        assert_eq!(expand_cells(&exp, false).unwrap().len(), 4);
        assert!(expand_cells(&exp, true).is_err());

        exp.max_cells = 3;
        let err = expand_cells(&exp, false).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }

    #[test]
    fn auto_capacity_covers_the_mean_with_margin() {
        let cfg = SimConfig::new(8, 8, 144, 4096, 8, 1);
        let cap = auto_capacity(&cfg);
        let mean = (8 * 144 * 8) as f64 / 64.0;
        assert!(cap as f64 >= mean + 6.0 * mean.sqrt());
        assert!(cap < 8 * 144 * 8);
    }

    #[test]
    fn comma_lists_parse() {
        assert!(matches!(
            OneOrMany::parse_list("8").unwrap(),
            OneOrMany::One(8)
        ));
        let many = OneOrMany::parse_list("8, 16,32").unwrap();
        assert_eq!(many.values(), vec![8, 16, 32]);
        assert!(OneOrMany::parse_list("8,x").is_err());
    }
}
