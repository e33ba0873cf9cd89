//! Run configuration: INI text with `[section]` headers and `key = value`
//! lines. Every key can be overridden by the environment variable
//! `EIGSPLIT_<SECTION>_<KEY>`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use eigsplit_core::adapt::{MarkStrategy, Normalization};
use eigsplit_core::hartree::PoissonOptions;
use eigsplit_core::ks::{atomic_number, element_symbol, AtomSpec, HamiltonianMode};
use eigsplit_core::scf::ScfOptions;
use eigsplit_core::split::{SplitStrategy, DEFAULT_GAP_THETA};
use ini::Ini;
use thiserror::Error;

pub const ENV_PREFIX: &str = "EIGSPLIT";

/// Heaviest element the core/valence tables cover.
const MAX_Z: u32 = 18;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{origin}: unknown key `{field}`")]
    Unknown { field: String, origin: Origin },
    #[error("{origin}, field `{field}`: {msg}")]
    Invalid { field: String, origin: Origin, msg: String },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line(usize),
    Env(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Env(v) => write!(f, "environment variable {v}"),
        }
    }
}

struct Key {
    section: &'static str,
    name: &'static str,
    doc: &'static str,
}

const fn key(section: &'static str, name: &'static str, doc: &'static str) -> Key {
    Key { section, name, doc }
}

const KEYS: &[Key] = &[
    key("system", "atoms", "comma-separated `symbol-or-Z x y z` entries, positions in Bohr"),
    key("system", "box", "half-width L of the cubic domain [-L, L]^3"),
    key("system", "grid", "coarse cells per box edge"),
    key("split", "strategy", "core-valence | eigenvalue-gap | homo-lumo"),
    key("split", "theta", "relative gap threshold of eigenvalue-gap"),
    key("scf", "mode", "lda | bare (kinetic and nuclear terms only)"),
    key("scf", "alpha", "mixing weight of the old density"),
    key("scf", "tol_density", "SCF stops once the density change drops below this"),
    key("scf", "tol_energy", "adaptation stops once the energy changes less than this; inf runs one phase"),
    key("scf", "max_scf", "SCF iterations per phase"),
    key("scf", "max_adapt", "adaptation rounds"),
    key("scf", "max_dofs", "adaptation stops before any mesh exceeds this many dofs"),
    key("adapt", "marking", "maximum | absolute"),
    key("adapt", "refine", "maximum marking: refine where eta >= refine * max"),
    key("adapt", "coarsen", "coarsen where eta <= coarsen * (max or tol)"),
    key("adapt", "tol", "absolute marking: refine where eta > tol"),
    key("adapt", "normalization", "per-orbital indicator scaling: max | l2 | sum | none"),
    key("eigen", "tol", "eigensolver residual tolerance"),
    key("eigen", "maxit", "eigensolver iteration limit"),
    key("eigen", "precond_iters", "inner CG steps of the kinetic preconditioner"),
    key("eigen", "random_init", "random instead of hydrogenic starting orbitals"),
    key("poisson", "tol", "relative CG tolerance of the Hartree solve"),
    key("poisson", "maxit", "CG iteration limit of the Hartree solve"),
    key("output", "dir", "directory for the summary, CSV, VTK and checkpoint files"),
    key("output", "vtk", "write VTK fields"),
    key("output", "checkpoint", "write a checkpoint of the final state"),
    key("output", "post_process", "orthogonalize all orbitals on the merged mesh at the end"),
    key("run", "seed", "random seed"),
];

fn num(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-3 {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn strategy_name(s: SplitStrategy) -> &'static str {
    s.name()
}

fn mode_name(m: HamiltonianMode) -> &'static str {
    match m {
        HamiltonianMode::Lda => "lda",
        HamiltonianMode::Bare => "bare",
    }
}

fn norm_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Max => "max",
        Normalization::L2 => "l2",
        Normalization::Sum => "sum",
        Normalization::None => "none",
    }
}

fn default_values() -> BTreeMap<(&'static str, &'static str), String> {
    let o = ScfOptions::default();
    let (marking, refine, coarsen, tol) = match o.marking {
        MarkStrategy::Maximum { refine, coarsen } => ("maximum", refine, coarsen, 1e-3),
        MarkStrategy::Absolute { tol, coarsen } => ("absolute", 0.5, coarsen, tol),
    };
    let v = [
        ("system", "atoms", "H 0 0 0".to_string()),
        ("system", "box", num(10.0)),
        ("system", "grid", "4".into()),
        ("split", "strategy", strategy_name(SplitStrategy::CoreValence).into()),
        ("split", "theta", num(DEFAULT_GAP_THETA)),
        ("scf", "mode", mode_name(o.mode).into()),
        ("scf", "alpha", num(o.alpha)),
        ("scf", "tol_density", num(o.tol_density)),
        ("scf", "tol_energy", num(o.tol_energy)),
        ("scf", "max_scf", o.max_scf.to_string()),
        ("scf", "max_adapt", o.max_adapt.to_string()),
        ("scf", "max_dofs", o.max_dofs.to_string()),
        ("adapt", "marking", marking.into()),
        ("adapt", "refine", num(refine)),
        ("adapt", "coarsen", num(coarsen)),
        ("adapt", "tol", num(tol)),
        ("adapt", "normalization", norm_name(o.normalization).into()),
        ("eigen", "tol", num(o.eig_tol)),
        ("eigen", "maxit", o.eig_maxit.to_string()),
        ("eigen", "precond_iters", o.precond_iters.to_string()),
        ("eigen", "random_init", o.random_init.to_string()),
        ("poisson", "tol", num(o.poisson.tol)),
        ("poisson", "maxit", o.poisson.maxit.to_string()),
        ("output", "dir", "eigsplit-out".into()),
        ("output", "vtk", "true".into()),
        ("output", "checkpoint", "true".into()),
        ("output", "post_process", o.post_process.to_string()),
        ("run", "seed", o.seed.to_string()),
    ];
    v.into_iter().map(|(s, k, x)| ((s, k), x)).collect()
}

/// The full default configuration as commented INI text.
pub fn defaults_ini() -> String {
    let values = default_values();
    let mut out = String::new();
    let mut section = "";
    for k in KEYS {
        if k.section != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", k.section));
            section = k.section;
        }
        out.push_str(&format!("# {}\n{} = {}\n", k.doc, k.name, values[&(k.section, k.name)]));
    }
    out
}

pub fn env_var(section: &str, name: &str) -> String {
    format!("{ENV_PREFIX}_{}_{}", section.to_ascii_uppercase(), name.to_ascii_uppercase())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub atoms: Vec<AtomSpec>,
    pub box_half_width: f64,
    pub grid: usize,
    pub strategy: SplitStrategy,
    pub scf: ScfOptions,
    pub out_dir: PathBuf,
    pub write_vtk: bool,
    pub write_checkpoint: bool,
}

/// Raw values with their origin, before typing.
struct Raw(BTreeMap<(&'static str, &'static str), (String, Origin)>);

impl Raw {
    fn get(&self, section: &'static str, name: &'static str) -> (&str, &Origin) {
        let (v, o) = &self.0[&(section, name)];
        (v.as_str(), o)
    }

    fn parse<T: std::str::FromStr>(&self, section: &'static str, name: &'static str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let (v, origin) = self.get(section, name);
        v.parse().map_err(|e: T::Err| invalid(section, name, origin, format!("`{v}`: {e}")))
    }

    fn positive(&self, section: &'static str, name: &'static str) -> Result<f64, ConfigError> {
        let x: f64 = self.parse(section, name)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(invalid(section, name, self.get(section, name).1, format!("{x} must be positive")))
        }
    }
}

fn invalid(section: &str, name: &str, origin: &Origin, msg: String) -> ConfigError {
    ConfigError::Invalid { field: format!("{section}.{name}"), origin: origin.clone(), msg }
}

/// Line of `key` inside `[section]`, 1-based.
fn line_of(text: &str, section: &str, name: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(s) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = s.trim().to_string();
        } else if let Some((k, _)) = t.split_once(['=', ':']) {
            if current == section && k.trim() == name {
                return Some(i + 1);
            }
        }
    }
    None
}

impl RunConfig {
    /// Parse INI text, then apply environment overrides read through `env`.
    pub fn from_ini_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.line,
            col: e.col,
            msg: e.msg.to_string(),
        })?;
        let mut raw: BTreeMap<_, _> = default_values().into_iter().map(|(k, v)| (k, (v, Origin::Default))).collect();
        for (section, props) in ini.iter() {
            for (name, value) in props.iter() {
                let sec = section.unwrap_or("");
                let line = line_of(text, sec, name).unwrap_or(0);
                let field = if sec.is_empty() { name.to_string() } else { format!("{sec}.{name}") };
                let Some(k) = KEYS.iter().find(|k| k.section == sec && k.name == name) else {
                    return Err(ConfigError::Unknown { field, origin: Origin::Line(line) });
                };
                raw.insert((k.section, k.name), (value.trim().to_string(), Origin::Line(line)));
            }
        }
        for k in KEYS {
            let var = env_var(k.section, k.name);
            if let Some(v) = env(&var) {
                raw.insert((k.section, k.name), (v.trim().to_string(), Origin::Env(var)));
            }
        }
        Self::from_raw(&Raw(raw))
    }

    /// Parse INI text with overrides from the process environment.
    pub fn from_ini(text: &str) -> Result<Self, ConfigError> {
        Self::from_ini_with_env(text, |v| std::env::var(v).ok())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_ini(&text)
    }

    fn from_raw(raw: &Raw) -> Result<Self, ConfigError> {
        let box_half_width = raw.positive("system", "box")?;
        let grid: usize = raw.parse("system", "grid")?;
        if grid == 0 {
            return Err(invalid("system", "grid", raw.get("system", "grid").1, "must be at least 1".into()));
        }
        let (atoms_text, origin) = raw.get("system", "atoms");
        let atoms = parse_atoms(atoms_text, box_half_width).map_err(|msg| invalid("system", "atoms", origin, msg))?;

        let (s, origin) = raw.get("split", "strategy");
        let strategy = match s.to_ascii_lowercase().as_str() {
            "core-valence" => SplitStrategy::CoreValence,
            "eigenvalue-gap" => SplitStrategy::EigenvalueGap { theta: raw.positive("split", "theta")? },
            "homo-lumo" => SplitStrategy::HomoLumo,
            _ => return Err(invalid("split", "strategy", origin, format!("unknown strategy `{s}`"))),
        };

        let (m, origin) = raw.get("scf", "mode");
        let mode = match m.to_ascii_lowercase().as_str() {
            "lda" => HamiltonianMode::Lda,
            "bare" => HamiltonianMode::Bare,
            _ => return Err(invalid("scf", "mode", origin, format!("unknown mode `{m}`"))),
        };
        let alpha: f64 = raw.parse("scf", "alpha")?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("scf", "alpha", raw.get("scf", "alpha").1, format!("{alpha} must lie in (0, 1)")));
        }

        let coarsen: f64 = raw.parse("adapt", "coarsen")?;
        if !(0.0..1.0).contains(&coarsen) {
            return Err(invalid(
                "adapt",
                "coarsen",
                raw.get("adapt", "coarsen").1,
                format!("{coarsen} must lie in [0, 1)"),
            ));
        }
        let (mk, origin) = raw.get("adapt", "marking");
        let marking = match mk.to_ascii_lowercase().as_str() {
            "maximum" => {
                let refine = raw.positive("adapt", "refine")?;
                if refine > 1.0 {
                    let o = raw.get("adapt", "refine").1;
                    return Err(invalid("adapt", "refine", o, format!("{refine} must not exceed 1")));
                }
                MarkStrategy::Maximum { refine, coarsen }
            }
            "absolute" => MarkStrategy::Absolute { tol: raw.positive("adapt", "tol")?, coarsen },
            _ => return Err(invalid("adapt", "marking", origin, format!("unknown marking `{mk}`"))),
        };
        // checked in every mode so that a bad value never goes unnoticed
        raw.positive("adapt", "tol")?;
        let (nm, origin) = raw.get("adapt", "normalization");
        let normalization = match nm.to_ascii_lowercase().as_str() {
            "max" => Normalization::Max,
            "l2" => Normalization::L2,
            "sum" => Normalization::Sum,
            "none" => Normalization::None,
            _ => return Err(invalid("adapt", "normalization", origin, format!("unknown normalization `{nm}`"))),
        };

        let count = |section, name| -> Result<usize, ConfigError> {
            let n: usize = raw.parse(section, name)?;
            if n == 0 {
                return Err(invalid(section, name, raw.get(section, name).1, "must be at least 1".into()));
            }
            Ok(n)
        };
        let scf = ScfOptions {
            alpha,
            tol_density: raw.positive("scf", "tol_density")?,
            tol_energy: raw.positive("scf", "tol_energy")?,
            max_scf: count("scf", "max_scf")?,
            max_adapt: raw.parse("scf", "max_adapt")?,
            max_dofs: count("scf", "max_dofs")?,
            eig_tol: raw.positive("eigen", "tol")?,
            eig_maxit: count("eigen", "maxit")?,
            precond_iters: raw.parse("eigen", "precond_iters")?,
            poisson: PoissonOptions { tol: raw.positive("poisson", "tol")?, maxit: count("poisson", "maxit")? },
            mode,
            marking,
            normalization,
            post_process: raw.parse("output", "post_process")?,
            seed: raw.parse("run", "seed")?,
            random_init: raw.parse("eigen", "random_init")?,
        };
        Ok(RunConfig {
            atoms,
            box_half_width,
            grid,
            strategy,
            scf,
            out_dir: PathBuf::from(raw.get("output", "dir").0),
            write_vtk: raw.parse("output", "vtk")?,
            write_checkpoint: raw.parse("output", "checkpoint")?,
        })
    }

    /// Human-readable atom list, e.g. `Li (0, 0, 0), H (0, 0, 3.015)`.
    pub fn atoms_label(&self) -> String {
        self.atoms
            .iter()
            .map(|a| {
                let z = a.charge as u32;
                let p = a.position;
                format!("{} ({}, {}, {})", element_symbol(z).unwrap_or("?"), p[0], p[1], p[2])
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn parse_atoms(text: &str, half_width: f64) -> Result<Vec<AtomSpec>, String> {
    let mut atoms = Vec::new();
    for (i, entry) in text.split(',').map(str::trim).filter(|e| !e.is_empty()).enumerate() {
        let parts: Vec<&str> = entry.split_whitespace().collect();
        let [id, x, y, z] = parts[..] else {
            return Err(format!("atom {}: expected `symbol-or-Z x y z`, got `{entry}`", i + 1));
        };
        let zn = match id.parse::<u32>() {
            Ok(n) => n,
            Err(_) => atomic_number(id).ok_or_else(|| format!("atom {}: unknown element `{id}`", i + 1))?,
        };
        if !(1..=MAX_Z).contains(&zn) {
            return Err(format!("atom {}: Z = {zn} is outside 1..={MAX_Z}", i + 1));
        }
        let mut pos = [0.0f64; 3];
        for (c, s) in pos.iter_mut().zip([x, y, z]) {
            *c = s.parse().map_err(|_| format!("atom {}: bad coordinate `{s}`", i + 1))?;
        }
        if pos.iter().any(|c| !(c.abs() < half_width)) {
            return Err(format!("atom {} at {pos:?} lies outside the box of half-width {half_width}", i + 1));
        }
        atoms.push(AtomSpec::new(zn as f64, pos));
    }
    if atoms.is_empty() {
        return Err("no atoms given".into());
    }
    Ok(atoms)
}
