//! The `pdo3d` command line: groups, basis solving, dimension tables,
//! equivariance sweeps, the Tetris demo and basis verification.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pdo3d_core::basis::{dimension_table, orthonormality_defect, solve_basis, verify_basis, DEFAULT_REL_TOL};
use pdo3d_core::discretize::default_sigma;
use pdo3d_core::{FiniteRotationGroup, Group, GroupSpec, KernelBasis, RepSpec};
use pdo3d_nn::equiv::RotationMode;
use pdo3d_nn::io::save_checkpoint;
use pdo3d_nn::model::{tetris_field_count, tetris_model_spec};
use pdo3d_nn::sweep::{run_sweep, InputKind, Level, SweepConfig, SweepReport};
use pdo3d_nn::tetris::{tetris_dataset, tetris_rotated_set, N_CLASSES, SHAPES};
use pdo3d_nn::train::{accuracy, predict};
use pdo3d_nn::{train, Model, SchemeSpec, TrainConfig};

/// Exit code for a completed check that did not pass.
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "pdo3d", version, about = "Steerable 3D PDO filters")]
pub struct Cli {
    /// Seed for every random draw (initialization, samples, rotations).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Artifact path: the basis dump, checkpoint, per-rotation CSV, ...
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Null-space threshold relative to the largest singular value.
    #[arg(long, global = true, default_value_t = DEFAULT_REL_TOL)]
    pub tol: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dump a finite rotation group: elements and Cayley table.
    Group {
        /// V, T, O, I, CN or DN.
        #[arg(long)]
        kind: String,
        /// Order parameter of CN and DN.
        #[arg(long)]
        n: Option<u32>,
    },
    /// Solve the PDO coefficient basis for one field pair.
    Basis {
        #[arg(long)]
        group: String,
        #[arg(long = "in")]
        rho_in: String,
        #[arg(long = "out")]
        rho_out: String,
    },
    /// Basis dimensions for all pairs of a list of fields.
    Table {
        #[arg(long)]
        group: String,
        /// Comma-separated field kinds (default depends on the group).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
    },
    /// Equivariance error of an initialized steerable stack.
    Equiv(EquivArgs),
    /// Train and evaluate the 3D Tetris classifier.
    Tetris(TetrisArgs),
    /// Check a basis against every group element (or Haar samples).
    Verify {
        #[arg(long)]
        group: String,
        #[arg(long = "in")]
        rho_in: String,
        #[arg(long = "out")]
        rho_out: String,
        /// Haar samples for SO(3).
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Basis dump to check instead of solving.
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-8)]
        max_residual: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Fd,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// The exact grid rotations contained in the group.
    Cubic,
    /// Haar-random rotations with trilinear resampling (SO(3) only).
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputsArg {
    Smooth,
    Raw,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Model,
    Layer,
}

#[derive(Args, Debug, Clone)]
pub struct SchemeArgs {
    #[arg(long, value_enum, default_value_t = SchemeArg::Fd)]
    pub scheme: SchemeArg,
    /// Gaussian kernel size.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Gaussian width (default: half the kernel radius).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Use raw sampled Gaussian derivatives without moment correction.
    #[arg(long)]
    pub uncorrected: bool,
}

impl SchemeArgs {
    pub fn spec(&self) -> SchemeSpec {
        match self.scheme {
            SchemeArg::Fd => SchemeSpec::Fd,
            SchemeArg::Gaussian => SchemeSpec::Gaussian {
                k: self.k,
                sigma: self.sigma.unwrap_or_else(|| default_sigma(self.k)),
                corrected: !self.uncorrected,
            },
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct EquivArgs {
    #[arg(long)]
    pub group: String,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Default: random for SO3, cubic otherwise.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Number of rotations (default 24 cubic, 100 random).
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid edge (default 16 cubic, 24 random).
    #[arg(long)]
    pub size: Option<usize>,
    /// Default: raw for cubic, smooth for random.
    #[arg(long, value_enum)]
    pub inputs: Option<InputsArg>,
    #[arg(long, value_enum, default_value_t = LevelArg::Model)]
    pub level: LevelArg,
    /// Blur width of the smooth inputs.
    #[arg(long, default_value_t = 2.0)]
    pub blur: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TetrisArgs {
    #[arg(long, default_value = "O")]
    pub group: String,
    #[arg(long, default_value = "regular")]
    pub features: String,
    /// Copies of the feature field per hidden layer (default: about 48 channels).
    #[arg(long)]
    pub fields: Option<usize>,
    #[arg(long, default_value_t = 12)]
    pub grid: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.98)]
    pub decay: f64,
    #[arg(long, default_value_t = 50)]
    pub decay_start: usize,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

/// What a command produced: the code to exit with and the text for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { code: 0, stdout }
    }
}

fn parse_group(s: &str) -> Result<Group> {
    let spec: GroupSpec = s.parse().with_context(|| format!("bad group {s:?}"))?;
    Ok(Group::build(spec)?)
}

fn parse_rep(s: &str) -> Result<RepSpec> {
    s.parse().with_context(|| format!("bad field kind {s:?}"))
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn json_string(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn write_artifact(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Field kinds tabulated by `table` when none are given.
pub fn default_kinds(group: GroupSpec) -> Vec<&'static str> {
    match group {
        GroupSpec::V => vec!["trivial", "quotient:CN-2", "regular"],
        GroupSpec::T => vec!["trivial", "quotient:V", "regular"],
        GroupSpec::O | GroupSpec::I => vec!["trivial", "quotient:T", "quotient:V", "regular"],
        GroupSpec::Cyclic(_) | GroupSpec::Dihedral(_) => vec!["trivial", "regular"],
        GroupSpec::SO3 => vec!["irrep:0", "irrep:1", "irrep:2"],
    }
}

pub fn cmd_group(kind: &str, n: Option<u32>, format: Format) -> Result<(String, String)> {
    let spec = GroupSpec::from_kind(kind, n)?;
    if !spec.is_finite() {
        bail!("group dumps are only defined for finite groups");
    }
    let g = FiniteRotationGroup::build(spec)?;
    let dump = json_string(&g.to_json())?;
    let text = match format {
        Format::Json => dump.clone(),
        Format::Csv => {
            let rows: Vec<Vec<String>> = g
                .elements()
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    std::iter::once(i.to_string())
                        .chain(e.row_major().iter().map(|x| x.to_string()))
                        .collect()
                })
                .collect();
            csv_string(
                &["id", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33"],
                &rows,
            )?
        }
    };
    Ok((text, dump))
}

fn dims_value(d: (usize, usize, usize)) -> Value {
    json!([d.0, d.1, d.2])
}

pub fn cmd_basis(group: &str, rho_in: &str, rho_out: &str, tol: f64, format: Format) -> Result<(String, KernelBasis)> {
    let g = parse_group(group)?;
    let ri = parse_rep(rho_in)?.build(&g)?;
    let ro = parse_rep(rho_out)?.build(&g)?;
    let kb = solve_basis(&ri, &ro, tol)?;
    let d = kb.dims();
    let text = match format {
        Format::Json => json_string(&json!({
            "group": g.spec().to_string(),
            "rho_in": rho_in,
            "rho_out": rho_out,
            "dims": dims_value(d),
        }))?,
        Format::Csv => csv_string(
            &["n_b0", "n_b1", "n_b2"],
            &[vec![d.0.to_string(), d.1.to_string(), d.2.to_string()]],
        )?,
    };
    Ok((text, kb))
}

/// Dimension triples for every (rho_in, rho_out) pair, row-major in `kinds`.
pub fn table(
    group: &str,
    kinds: Option<&[String]>,
    tol: f64,
) -> Result<(GroupSpec, Vec<String>, Vec<Vec<(usize, usize, usize)>>)> {
    let g = parse_group(group)?;
    let names: Vec<String> = match kinds {
        Some(k) if !k.is_empty() => k.to_vec(),
        _ => default_kinds(g.spec()).into_iter().map(String::from).collect(),
    };
    let specs = names.iter().map(|s| parse_rep(s)).collect::<Result<Vec<_>>>()?;
    let t = dimension_table(&g, &specs, tol)?;
    Ok((g.spec(), names, t))
}

pub fn cmd_table(group: &str, kinds: Option<&[String]>, tol: f64, format: Format) -> Result<String> {
    let (spec, names, t) = table(group, kinds, tol)?;
    match format {
        Format::Json => json_string(&json!({
            "group": spec.to_string(),
            "kinds": names,
            "dims": t.iter().map(|row| row.iter().map(|&d| dims_value(d)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })),
        Format::Csv => {
            let mut rows = Vec::new();
            for (i, row) in t.iter().enumerate() {
                for (j, d) in row.iter().enumerate() {
                    rows.push(vec![
                        names[i].clone(),
                        names[j].clone(),
                        d.0.to_string(),
                        d.1.to_string(),
                        d.2.to_string(),
                    ]);
                }
            }
            csv_string(&["rho_in", "rho_out", "n_b0", "n_b1", "n_b2"], &rows)
        }
    }
}

pub fn sweep_config(a: &EquivArgs, seed: u64) -> Result<SweepConfig> {
    let group: GroupSpec = a.group.parse().with_context(|| format!("bad group {:?}", a.group))?;
    let mode = a.mode.unwrap_or(if group == GroupSpec::SO3 {
        ModeArg::Random
    } else {
        ModeArg::Cubic
    });
    let mut cfg = match mode {
        ModeArg::Cubic => SweepConfig::cubic(group, a.scheme.spec(), seed),
        ModeArg::Random => SweepConfig {
            group,
            ..SweepConfig::so3(a.scheme.spec(), seed)
        },
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(i) = a.inputs {
        cfg.inputs = match i {
            InputsArg::Smooth => vec![InputKind::Smooth],
            InputsArg::Raw => vec![InputKind::Raw],
            InputsArg::Both => vec![InputKind::Smooth, InputKind::Raw],
        };
    }
    cfg.level = match a.level {
        LevelArg::Model => Level::Model,
        LevelArg::Layer => Level::Layer,
    };
    cfg.blur_sigma = a.blur;
    Ok(cfg)
}

fn kind_name(k: InputKind) -> &'static str {
    match k {
        InputKind::Smooth => "smooth",
        InputKind::Raw => "raw",
    }
}

pub fn sweep_csv(r: &SweepReport) -> Result<String> {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            vec![
                row.scheme.clone(),
                row.kernel_size.to_string(),
                row.sigma.map(|s| s.to_string()).unwrap_or_default(),
                row.rotation_id.to_string(),
                row.error.map(|e| format!("{e:e}")).unwrap_or_else(|| "nan".into()),
                kind_name(row.input).into(),
            ]
        })
        .collect();
    csv_string(
        &["scheme", "kernel_size", "sigma", "rotation_id", "error", "input"],
        &rows,
    )
}

pub fn sweep_summary(r: &SweepReport) -> Value {
    let c = &r.config;
    json!({
        "group": c.group.to_string(),
        "scheme": c.scheme,
        "mode": match c.mode { RotationMode::ExactCubic => "cubic", RotationMode::Trilinear => "random" },
        "size": c.size,
        "level": match c.level { Level::Model => "model", Level::Layer => "layer" },
        "summaries": r.summaries.iter().map(|(k, s)| json!({
            "input": kind_name(*k),
            "mean": s.mean,
            "std": s.std,
            "max": s.max,
            "n": s.n,
            "undefined": s.undefined,
        })).collect::<Vec<_>>(),
    })
}

pub fn cmd_equiv(a: &EquivArgs, seed: u64, format: Format) -> Result<(String, String)> {
    let report = run_sweep(&sweep_config(a, seed)?)?;
    let rows = sweep_csv(&report)?;
    let text = match format {
        Format::Json => json_string(&sweep_summary(&report))?,
        Format::Csv => rows.clone(),
    };
    Ok((text, rows))
}

/// Result of one Tetris run.
pub struct TetrisRun {
    pub model: Model,
    pub report: Value,
    pub test_accuracy: f64,
    pub per_rotation: Vec<f64>,
}

pub fn run_tetris(a: &TetrisArgs, seed: u64) -> Result<TetrisRun> {
    let t0 = Instant::now();
    let g = parse_group(&a.group)?;
    let fields = match a.fields {
        Some(f) => f,
        None => tetris_field_count(&g, &a.features)?,
    };
    let spec = tetris_model_spec(g.spec(), &a.features, fields, a.grid, a.scheme.spec());
    let mut model = Model::build(&spec, seed)?;
    let (x, labels) = tetris_dataset(a.grid)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        decay: a.decay,
        decay_start: a.decay_start,
        seed,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &x, &labels, &cfg)?;
    let (xt, lt, rot_ids) = tetris_rotated_set(a.grid, model.in_field())?;
    let pred = predict(&mut model, &xt, 24)?;
    let test_accuracy = accuracy(&pred, &lt);
    let n_rot = rot_ids.iter().max().map_or(0, |m| m + 1);
    let mut rot_hits = vec![0usize; n_rot];
    let mut class_hits = vec![0usize; N_CLASSES];
    for ((&p, &l), &r) in pred.iter().zip(&lt).zip(&rot_ids) {
        if p == l {
            rot_hits[r] += 1;
            class_hits[l] += 1;
        }
    }
    let per_rotation: Vec<f64> = rot_hits.iter().map(|&h| h as f64 / N_CLASSES as f64).collect();
    let per_class: Vec<f64> = class_hits.iter().map(|&h| h as f64 / n_rot as f64).collect();
    let last = history.last();
    let report = json!({
        "group": g.spec().to_string(),
        "features": a.features,
        "fields": fields,
        "grid": a.grid,
        "epochs": a.epochs,
        "seed": seed,
        "n_params": model.n_params(),
        "final_loss": last.map(|h| h.loss),
        "train_accuracy": last.map(|h| h.train_accuracy),
        "test_accuracy": test_accuracy,
        "per_rotation": per_rotation,
        "per_class": SHAPES.iter().zip(&per_class).map(|((name, _), acc)| json!({"shape": name, "accuracy": acc})).collect::<Vec<_>>(),
        "seconds": t0.elapsed().as_secs_f64(),
    });
    Ok(TetrisRun {
        model,
        report,
        test_accuracy,
        per_rotation,
    })
}

pub fn cmd_tetris(a: &TetrisArgs, seed: u64, format: Format, output: Option<&Path>) -> Result<String> {
    let run = run_tetris(a, seed)?;
    if let Some(p) = output {
        save_checkpoint(p, &run.model, run.report.clone())?;
    }
    match format {
        Format::Json => json_string(&run.report),
        Format::Csv => {
            let rows: Vec<Vec<String>> = run
                .per_rotation
                .iter()
                .enumerate()
                .map(|(r, acc)| vec![r.to_string(), acc.to_string()])
                .collect();
            csv_string(&["rotation_id", "accuracy"], &rows)
        }
    }
}

pub struct Verification {
    pub dims: (usize, usize, usize),
    pub residual: f64,
    pub orthonormality: f64,
}

pub fn verify(
    group: &str,
    rho_in: &str,
    rho_out: &str,
    basis: Option<&Path>,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<Verification> {
    let g = parse_group(group)?;
    let kb = match basis {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: Value = serde_json::from_str(&text)?;
            let kb = KernelBasis::from_json(&v, &g)?;
            let ri = parse_rep(rho_in)?.build(&g)?;
            let ro = parse_rep(rho_out)?.build(&g)?;
            if kb.rho_in().dim() != ri.dim() || kb.rho_out().dim() != ro.dim() {
                bail!("basis dump does not match the requested field pair");
            }
            kb
        }
        None => solve_basis(&parse_rep(rho_in)?.build(&g)?, &parse_rep(rho_out)?.build(&g)?, tol)?,
    };
    Ok(Verification {
        dims: kb.dims(),
        residual: verify_basis(&kb, samples, seed)?,
        orthonormality: orthonormality_defect(&kb),
    })
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let out = cli.output.as_deref();
    match &cli.command {
        Command::Group { kind, n } => {
            let (text, dump) = cmd_group(kind, *n, cli.format)?;
            if let Some(p) = out {
                write_artifact(p, &dump)?;
            }
            Ok(Outcome::ok(text))
        }
        Command::Basis { group, rho_in, rho_out } => {
            let (text, kb) = cmd_basis(group, rho_in, rho_out, cli.tol, cli.format)?;
            if let Some(p) = out {
                write_artifact(p, &json_string(&kb.to_json())?)?;
            }
            Ok(Outcome::ok(text))
        }
        Command::Table { group, kinds } => {
            let text = cmd_table(group, kinds.as_deref(), cli.tol, cli.format)?;
            if let Some(p) = out {
                write_artifact(p, &text)?;
            }
            Ok(Outcome::ok(text))
        }
        Command::Equiv(a) => {
            let (text, rows) = cmd_equiv(a, cli.seed, cli.format)?;
            if let Some(p) = out {
                write_artifact(p, &rows)?;
            }
            Ok(Outcome::ok(text))
        }
        Command::Tetris(a) => Ok(Outcome::ok(cmd_tetris(a, cli.seed, cli.format, out)?)),
        Command::Verify {
            group,
            rho_in,
            rho_out,
            samples,
            basis,
            max_residual,
        } => {
            let v = verify(group, rho_in, rho_out, basis.as_deref(), *samples, cli.seed, cli.tol)?;
            let pass = v.residual < *max_residual && v.orthonormality < 1e-8;
            let text = match cli.format {
                Format::Json => json_string(&json!({
                    "dims": dims_value(v.dims),
                    "residual": v.residual,
                    "orthonormality": v.orthonormality,
                    "max_residual": max_residual,
                    "pass": pass,
                }))?,
                Format::Csv => csv_string(
                    &["n_b0", "n_b1", "n_b2", "residual", "orthonormality", "pass"],
                    &[vec![
                        v.dims.0.to_string(),
                        v.dims.1.to_string(),
                        v.dims.2.to_string(),
                        format!("{:e}", v.residual),
                        format!("{:e}", v.orthonormality),
                        pass.to_string(),
                    ]],
                )?,
            };
            Ok(Outcome {
                code: if pass { 0 } else { EXIT_CHECK_FAILED },
                stdout: text,
            })
        }
    }
}

/// Parses `args`, runs the command and writes to the given streams.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let s = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(s.as_bytes())
            } else {
                stderr.write_all(s.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli) {
        Ok(o) => {
            let _ = stdout.write_all(o.stdout.as_bytes());
            o.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("pdo3d").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    fn json_out(args: &[&str]) -> Value {
        let (code, out, err) = run_str(args);
        assert_eq!(code, 0, "{err}");
        serde_json::from_str(&out).unwrap()
    }

    #[test]
    fn unknown_flags_are_rejected() {
        let (code, _, err) = run_str(&["group", "--kind", "O", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("--bogus"));
        assert_eq!(run_str(&["frobnicate"]).0, 1);
    }

    #[test]
    fn global_flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from([
            "pdo3d", "table", "--group", "O", "--seed", "7", "--format", "csv", "-o", "x.csv",
        ])
        .unwrap();
        assert_eq!(cli.seed, 7);
        assert_eq!(cli.format, Format::Csv);
        assert_eq!(cli.output.as_deref(), Some(Path::new("x.csv")));
        assert_eq!(cli.tol, DEFAULT_REL_TOL);
    }

    #[test]
    fn group_sizes() {
        for (args, n) in [
            (vec!["group", "--kind", "O"], 24),
            (vec!["group", "--kind", "CN", "--n", "1"], 1),
            (vec!["group", "--kind", "I"], 60),
        ] {
            let v = json_out(&args);
            assert_eq!(v["size"].as_u64(), Some(n), "{args:?}");
        }
        let (code, out, _) = run_str(&["group", "--kind", "T", "--format", "csv"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 13);
    }

    #[test]
    fn bad_specs_fail_with_a_message() {
        let (code, _, err) = run_str(&["group", "--kind", "Q"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error:"));
        assert_eq!(run_str(&["group", "--kind", "CN"]).0, 1);
        assert_eq!(
            run_str(&["basis", "--group", "O", "--in", "quotient:I", "--out", "trivial"]).0,
            1
        );
    }

    #[test]
    fn basis_dims() {
        let v = json_out(&["basis", "--group", "O", "--in", "trivial", "--out", "trivial"]);
        assert_eq!(v["dims"], json!([1, 0, 1]));
        let v = json_out(&["basis", "--group", "SO3", "--in", "irrep:0", "--out", "irrep:0"]);
        assert_eq!(v["dims"][0], json!(1));
        let (_, out, _) = run_str(&[
            "basis", "--group", "O", "--in", "regular", "--out", "regular", "--format", "csv",
        ]);
        assert_eq!(out.lines().nth(1), Some("24,72,144"));
    }

    #[test]
    fn basis_dump_round_trips_through_verify() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        let ps = p.to_str().unwrap();
        json_out(&[
            "basis",
            "--group",
            "T",
            "--in",
            "quotient:V",
            "--out",
            "regular",
            "-o",
            ps,
        ]);
        let v = json_out(&[
            "verify",
            "--group",
            "T",
            "--in",
            "quotient:V",
            "--out",
            "regular",
            "--basis",
            ps,
        ]);
        assert_eq!(v["pass"], json!(true));
        assert_eq!(v["dims"], json!([3, 9, 18]));
        let (code, _, err) = run_str(&[
            "verify", "--group", "T", "--in", "regular", "--out", "regular", "--basis", ps,
        ]);
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn verify_failure_has_its_own_exit_code() {
        let (code, out, _) = run_str(&[
            "verify",
            "--group",
            "O",
            "--in",
            "trivial",
            "--out",
            "regular",
            "--max-residual",
            "0",
        ]);
        assert_eq!(code, EXIT_CHECK_FAILED);
        assert!(out.contains("\"pass\": false"));
    }

    #[test]
    fn table_includes_trivial_row_and_column() {
        let v = json_out(&["table", "--group", "V"]);
        assert_eq!(v["kinds"][0], json!("trivial"));
        assert_eq!(v["dims"][0][0], json!([1, 0, 3]));
        let (_, out, _) = run_str(&["table", "--group", "T", "--kinds", "trivial,regular", "--format", "csv"]);
        assert_eq!(out.lines().count(), 5);
    }

    #[test]
    fn empty_sweep_exits_cleanly() {
        let v = json_out(&["equiv", "--group", "O", "--n", "0", "--size", "8"]);
        assert_eq!(v["summaries"][0]["n"], json!(0));
        let (code, out, _) = run_str(&["equiv", "--group", "O", "--n", "0", "--size", "8", "--format", "csv"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 1);
    }

    #[test]
    fn small_cubic_sweep_is_exact() {
        let v = json_out(&["equiv", "--group", "O", "--size", "8", "--n", "6"]);
        assert!(v["summaries"][0]["max"].as_f64().unwrap() < 1e-10);
    }

    #[test]
    fn random_mode_needs_so3() {
        assert_eq!(run_str(&["equiv", "--group", "O", "--mode", "random", "--n", "1"]).0, 1);
    }

    #[test]
    fn scheme_defaults() {
        let cli = Cli::try_parse_from(["pdo3d", "equiv", "--group", "SO3", "--scheme", "gaussian"]).unwrap();
        let Command::Equiv(a) = cli.command else { panic!() };
        assert_eq!(
            a.scheme.spec(),
            SchemeSpec::Gaussian {
                k: 5,
                sigma: 1.0,
                corrected: true
            }
        );
        let cfg = sweep_config(&a, 0).unwrap();
        assert_eq!((cfg.n, cfg.size, cfg.mode), (100, 24, RotationMode::Trilinear));
    }

    #[test]
    fn untrained_tetris_is_deterministic() {
        let args = ["tetris", "--epochs", "0", "--grid", "8", "--fields", "1", "--seed", "3"];
        let a = json_out(&args);
        let b = json_out(&args);
        assert_eq!(a["test_accuracy"], b["test_accuracy"]);
        assert_eq!(a["per_rotation"].as_array().unwrap().len(), 24);
        let acc = a["test_accuracy"].as_f64().unwrap();
        assert!(acc <= 0.5, "untrained accuracy {acc}");
    }

    #[test]
    fn tetris_checkpoint_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        json_out(&[
            "tetris",
            "--epochs",
            "1",
            "--grid",
            "8",
            "--fields",
            "1",
            "-o",
            p.to_str().unwrap(),
        ]);
        let (m, h) = pdo3d_nn::io::load_checkpoint(&p).unwrap();
        assert_eq!(h.extra["epochs"], json!(1));
        assert!(m.n_params() > 0);
    }
}
