use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use favlab_core::config::KeyValues;
use favlab_core::corpus::{
    gap_configuration, gap_corpus, mutation_base, run_mutation, staircase, standard_corpus, CorpusEntry, Mutation,
};
use favlab_core::directions::{iterate_enlargement, DirectionSet, DyadicInterval};
use favlab_core::energy::{build_corona, check_partition, check_tree_bounds, compute_energies, write_energy_csv};
use favlab_core::generators::GeneratorSpec;
use favlab_core::geometry::Direction;
use favlab_core::lattice::build_lattice;
use favlab_core::pipeline::{
    avoided_directions, header, run_pipeline, write_bundle, RunOptions, RunOutcome, RunParams,
};
use favlab_core::sets::{favard, projection_length, projection_profile, pushforward_density, DiscreteMeasure, PlanarSet};
use favlab_core::svg;

#[derive(Parser)]
#[command(name = "favlab", version, about = "Projections, conical energies and gap extraction on planar samples")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "FAVLAB_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ParamArgs {
    /// key=value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter override, e.g. `-p delta=0.5`.
    #[arg(short = 'p', long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args, Clone)]
struct GenArgs {
    #[arg(long)]
    n: Option<u32>,
    /// Number of segments when offsets are not given.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    direction: Option<f64>,
    #[arg(long)]
    offsets: Option<String>,
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    starts: Option<String>,
    #[arg(long)]
    lip: Option<f64>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    Standard,
    Gap,
    Mutations,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a generated set as JSON and its sample as CSV.
    Generate {
        /// cantor4 | segments | lipschitz | staircase | gap-config
        kind: String,
        #[command(flatten)]
        gen: GenArgs,
        /// Mass resolution of the sample.
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Projection lengths over all directions and their mean.
    Favard {
        set: PathBuf,
        #[arg(long, default_value_t = 4096)]
        n_angles: usize,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Projection length and pushforward density in one direction.
    Project {
        set: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 1e-2)]
        bin_width: f64,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Cube lattice and conical energies.
    Energies {
        /// Set JSON; otherwise the config must name a generator `kind`.
        #[arg(long)]
        set: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Energies plus the stopping-time trees and their bounds.
    Corona {
        #[arg(long)]
        set: Option<PathBuf>,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Every checker on a set or a built-in corpus.
    Verify {
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long, value_enum)]
        corpus: Option<Corpus>,
        /// Restrict the mutation corpus to one mutation.
        #[arg(long)]
        mutation: Option<String>,
        /// Number of gap configurations.
        #[arg(long, default_value_t = 26)]
        count: usize,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
    /// Enlargement iteration of a direction set inside a dyadic interval.
    IterateDirections {
        /// `depth:index` of `J₀`.
        #[arg(long)]
        j0: String,
        /// Bitset text `depth=..;hex=..` of `G₀`.
        #[arg(long, conflicts_with = "set")]
        g: Option<String>,
        /// Use the avoided directions of this set as `G₀`.
        #[arg(long)]
        set: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        depth: u32,
        #[arg(long, default_value_t = 5e-3)]
        spectrum_h: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0.5)]
        s: f64,
        #[arg(long, default_value = "favlab-out")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Check(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Res<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("FAIL {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Generate { kind, gen, h, out } => generate(&kind, &gen, h, &out),
        Cmd::Favard { set, n_angles, out } => cmd_favard(&set, n_angles, &out),
        Cmd::Project { set, theta, h, bin_width, out } => project(&set, theta, h, bin_width, &out),
        Cmd::Energies { set, params, out } => energies(set.as_deref(), &params, &out, false),
        Cmd::Corona { set, params, out } => energies(set.as_deref(), &params, &out, true),
        Cmd::Verify { set, corpus, mutation, count, params, out } => {
            verify(set.as_deref(), corpus, mutation.as_deref(), count, &params, &out)
        }
        Cmd::IterateDirections { j0, g, set, depth, spectrum_h, eps, s, out } => {
            iterate(&j0, g.as_deref(), set.as_deref(), depth, spectrum_h, eps, s, &out)
        }
    }
}

fn write_text(dir: &Path, name: &str, echo: &KeyValues, body: &str) -> Res<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), format!("{}{body}", header(echo)))?;
    Ok(())
}

fn load_set(path: &Path) -> Res<PlanarSet> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(PlanarSet::from_json(&text)?)
}

fn load_params(p: &ParamArgs) -> Res<KeyValues> {
    let mut kv = match &p.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::new(),
    };
    kv.merge(&KeyValues::parse_pairs(p.params.iter().map(String::as_str))?);
    Ok(kv)
}

/// The set named by `--set` or by a generator `kind` in the parameters,
/// with the keys that describe it.
fn resolve_set(set: Option<&Path>, kv: &KeyValues) -> Res<(PlanarSet, KeyValues)> {
    let mut echo = KeyValues::new();
    if let Some(path) = set {
        echo.set("set", path.display());
        return Ok((load_set(path)?, echo));
    }
    if kv.contains("kind") {
        for key in ["kind", "n", "direction", "offsets", "lengths", "starts", "lip", "nodes", "path"] {
            if let Some(v) = kv.raw(key) {
                echo.set(key, v);
            }
        }
        let kind = kv.raw("kind").unwrap_or_default();
        let set = match kind {
            "staircase" => staircase()?,
            "gap-config" => gap_configuration(kv.get_or("seed", 0)?)?,
            _ => GeneratorSpec::from_config(kv)?.build()?,
        };
        return Ok((set, echo));
    }
    Err(Failure::Usage("give --set or a generator `kind` in the parameters".into()))
}

fn generate(kind: &str, gen: &GenArgs, h: f64, out: &Path) -> Res<()> {
    let mut kv = KeyValues::new();
    kv.set("kind", kind);
    if let Some(n) = gen.n {
        kv.set("n", n);
    }
    if let Some(d) = gen.direction {
        kv.set("direction", d);
    }
    let offsets = match (&gen.offsets, gen.k) {
        (Some(o), _) => Some(o.clone()),
        (None, Some(k)) => Some((0..k).map(|i| format!("{}", 0.25 * i as f64)).collect::<Vec<_>>().join(",")),
        (None, None) => None,
    };
    if let (Some(o), Some(k)) = (&offsets, gen.k) {
        if o.split(',').count() != k {
            return Err(Failure::Usage(format!("--k {k} does not match the number of offsets")));
        }
    }
    for (key, v) in [("offsets", &offsets), ("lengths", &gen.lengths), ("starts", &gen.starts)] {
        if let Some(v) = v {
            kv.set(key, v);
        }
    }
    if let Some(l) = gen.lip {
        kv.set("lip", l);
    }
    if let Some(n) = gen.nodes {
        kv.set("nodes", n);
    }
    if let Some(s) = gen.seed {
        kv.set("seed", s);
    }
    let (set, mut echo) = resolve_set(None, &kv)?;
    if let Some(s) = gen.seed {
        echo.set("seed", s);
    }
    echo.set("h", h);
    let mu = DiscreteMeasure::sample(&set, h)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("set.json"), set.to_json()?)?;
    let mut csv = Vec::new();
    mu.write_csv(&mut csv)?;
    write_text(out, "sample.csv", &echo, &String::from_utf8_lossy(&csv))?;
    println!("{} primitives, {} sample points -> {}", set.primitives().len(), mu.len(), out.display());
    Ok(())
}

fn cmd_favard(path: &Path, n_angles: usize, out: &Path) -> Res<()> {
    let set = load_set(path)?;
    let value = favard(&set, n_angles)?;
    let profile = projection_profile(&set, n_angles);
    let mut echo = KeyValues::new();
    echo.set("set", path.display());
    echo.set("n_angles", n_angles);
    echo.set("favard", format!("{value:.12e}"));
    let mut body = String::from("theta,length\n");
    for (t, l) in &profile {
        let _ = writeln!(body, "{t},{l}");
    }
    write_text(out, "favard.csv", &echo, &body)?;
    fs::write(out.join("favard.svg"), svg::favard_plot(&profile, &echo))?;
    println!("favard = {value:.12}");
    Ok(())
}

fn project(path: &Path, theta: f64, h: f64, bin_width: f64, out: &Path) -> Res<()> {
    let set = load_set(path)?;
    let dir = Direction::new(theta);
    let length = projection_length(&set, dir);
    let mu = DiscreteMeasure::sample(&set, h)?;
    let d = pushforward_density(&mu, dir, bin_width)?;
    let mut echo = KeyValues::new();
    echo.set("set", path.display());
    echo.set("theta", theta);
    echo.set("h", h);
    echo.set("bin_width", bin_width);
    echo.set("length", format!("{length:.12e}"));
    echo.set("sup_norm", format!("{:.12e}", d.sup_norm));
    echo.set("degenerate", d.degenerate);
    let mut body = String::from("bin_start,density\n");
    for (i, v) in d.bins.iter().enumerate() {
        let _ = writeln!(body, "{},{v}", d.origin + i as f64 * d.bin_width);
    }
    write_text(out, "density.csv", &echo, &body)?;
    println!("length = {length:.12}, sup density = {:.6}", d.sup_norm);
    Ok(())
}

fn energies(set: Option<&Path>, p: &ParamArgs, out: &Path, corona: bool) -> Res<()> {
    let kv = load_params(p)?;
    let params = RunParams::from_kv(&kv)?;
    let (set, gen_echo) = resolve_set(set, &kv)?;
    let mut echo = params.to_kv();
    echo.merge(&gen_echo);
    let mu = DiscreteMeasure::sample(&set, params.h)?;
    let g = params.g.resolve(&params, &set)?;
    let lattice = build_lattice(&mu, params.aspect(), params.rho, params.depth)?;
    let report = compute_energies(&lattice, &mu, &g, &params.j(), &params.energy_params())?;
    let mut lat = Vec::new();
    lattice.write_jsonl(&mut lat)?;
    write_text(out, "lattice.jsonl", &echo, &String::from_utf8_lossy(&lat))?;
    if !corona {
        let mut csv = Vec::new();
        write_energy_csv(&mut csv, &lattice, &report, None)?;
        write_text(out, "energies.csv", &echo, &String::from_utf8_lossy(&csv))?;
        println!("{} cubes, max E_G = {:.6e}", lattice.cubes.len(), report.e_g.iter().copied().fold(0.0, f64::max));
        return Ok(());
    }
    let k = build_corona(&lattice, &report.e_g, params.aspect(), params.delta, params.a)?;
    let mut csv = Vec::new();
    write_energy_csv(&mut csv, &lattice, &report, Some(&k))?;
    write_text(out, "energies.csv", &echo, &String::from_utf8_lossy(&csv))?;
    let (rows, verdict) = check_tree_bounds(&k, &lattice, &report.e_g);
    let mut w = csv_writer();
    for r in &rows {
        w.serialize(r)?;
    }
    write_text(out, "tree_bounds.csv", &echo, &String::from_utf8_lossy(&w.into_inner().map_err(|e| e.to_string())?))?;
    println!("{} cubes, {} trees in {} layers", lattice.cubes.len(), k.trees.len(), k.n_layers());
    verdict.and_then(|()| check_partition(&k, &lattice)).map_err(|e| Failure::Check(format!("tree_bounds: {e}")))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn apply_overrides(params: &RunParams, kv: &KeyValues) -> Res<RunParams> {
    let mut merged = params.to_kv();
    merged.merge(kv);
    Ok(RunParams::from_kv(&merged)?)
}

fn report(o: &RunOutcome) {
    let status = if o.passed() { "PASS" } else { "FAIL" };
    let failures = o.failures();
    println!("{status} {} ({} points, {} cubes){}", o.name, o.mu.len(), o.lattice.cubes.len(), if failures.is_empty() {
        String::new()
    } else {
        format!(": {}", failures.join(", "))
    });
}

fn corpus_row(o: &RunOutcome) -> String {
    let first = o.first_failure().map(|c| c.name).unwrap_or("");
    let ratios: Vec<String> = o.ratios.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
    format!("{},{},{},{}\n", o.name, o.passed(), first, ratios.join(";"))
}

fn verify(
    set: Option<&Path>,
    corpus: Option<Corpus>,
    mutation: Option<&str>,
    count: usize,
    p: &ParamArgs,
    out: &Path,
) -> Res<()> {
    let kv = load_params(p)?;
    let Some(corpus) = corpus else {
        if mutation.is_some() {
            return Err(Failure::Usage("--mutation needs --corpus mutations".into()));
        }
        let params = RunParams::from_kv(&kv)?;
        let (set, gen_echo) = resolve_set(set, &kv)?;
        let mu = DiscreteMeasure::sample(&set, params.h)?;
        let g = params.g.resolve(&params, &set)?;
        let mut o = run_pipeline("set", &set, mu, g, &params, &RunOptions::default())?;
        o.echo.merge(&gen_echo);
        write_bundle(&o, out)?;
        report(&o);
        return match o.first_failure() {
            None => Ok(()),
            Some(c) => Err(Failure::Check(format!("{}: {}", c.name, c.detail))),
        };
    };
    if set.is_some() {
        return Err(Failure::Usage("--set and --corpus are exclusive".into()));
    }
    let mut table = String::from("name,passed,first_failure,ratios\n");
    match corpus {
        Corpus::Standard | Corpus::Gap => {
            let entries: Vec<CorpusEntry> =
                if matches!(corpus, Corpus::Standard) { standard_corpus()? } else { gap_corpus(count)? };
            let mut first_fail = None;
            for e in entries {
                let e = e.with_params(apply_overrides(&e.params, &kv)?);
                let o = e.run(&RunOptions::default())?;
                write_bundle(&o, &out.join(&o.name))?;
                report(&o);
                table.push_str(&corpus_row(&o));
                if first_fail.is_none() {
                    first_fail = o.first_failure().map(|c| format!("{} ({}): {}", c.name, o.name, c.detail));
                }
            }
            write_text(out, "corpus.csv", &kv, &table)?;
            first_fail.map_or(Ok(()), |m| Err(Failure::Check(m)))
        }
        Corpus::Mutations => {
            let base = mutation_base()?;
            let base = base.with_params(apply_overrides(&base.params, &kv)?);
            let b = base.run(&RunOptions::default())?;
            write_bundle(&b, &out.join(&b.name))?;
            report(&b);
            table.push_str(&corpus_row(&b));
            if let Some(c) = b.first_failure() {
                write_text(out, "corpus.csv", &kv, &table)?;
                return Err(Failure::Check(format!("{} (unmutated base): {}", c.name, c.detail)));
            }
            let chosen: Vec<Mutation> = match mutation {
                None => Mutation::ALL.to_vec(),
                Some(name) => vec![Mutation::ALL
                    .into_iter()
                    .find(|m| m.name() == name)
                    .ok_or_else(|| Failure::Usage(format!("unknown mutation `{name}`")))?],
            };
            let mut flipped = Vec::new();
            for m in chosen {
                let r = run_mutation(&base, &b, m)?;
                write_bundle(&r.outcome, &out.join(m.name()))?;
                report(&r.outcome);
                table.push_str(&corpus_row(&r.outcome));
                println!("  {} targets {}: flipped [{}]", m.name(), m.target(), r.failures.join(", "));
                flipped.push(format!("{} ({})", r.failures.join("+"), m.name()));
            }
            write_text(out, "corpus.csv", &kv, &table)?;
            Err(Failure::Check(flipped.join("; ")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    j0: &str,
    g: Option<&str>,
    set: Option<&Path>,
    depth: u32,
    spectrum_h: f64,
    eps: f64,
    s: f64,
    out: &Path,
) -> Res<()> {
    let (d, i) = j0.split_once(':').ok_or_else(|| Failure::Usage(format!("--j0 must be depth:index, got `{j0}`")))?;
    let j = DyadicInterval::new(d.trim().parse()?, i.trim().parse()?)?;
    let mut echo = KeyValues::new();
    echo.set("j0", j0);
    echo.set("eps", eps);
    echo.set("s", s);
    let g0 = match (g, set) {
        (Some(text), _) => {
            echo.set("g", text);
            DirectionSet::from_text(text)?
        }
        (None, Some(path)) => {
            echo.set("set", path.display());
            echo.set("depth", depth);
            echo.set("spectrum_h", spectrum_h);
            let g_t = avoided_directions(&load_set(path)?, spectrum_h, depth)?;
            g_t.intersection(&DirectionSet::from_intervals(depth, [j])?)
        }
        (None, None) => return Err(Failure::Usage("give --g or --set".into())),
    };
    let it = iterate_enlargement(j, &g0, eps, s).map_err(|e| match e {
        favlab_core::directions::DirectionError::BoundExceeded(_) => Failure::Check(e.to_string()),
        other => Failure::Usage(other.to_string()),
    })?;
    let size = j.cells(g0.depth()).len() as f64;
    let mut body = String::from("step,count,fraction,i_family,i_star,b_delta_in,b_delta_out,verified\n");
    let _ = writeln!(body, "0,{},{},,,,,", g0.count(), g0.count() as f64 / size);
    let mut failed = None;
    for (k, t) in it.traces.iter().enumerate() {
        let ok = t.verify(eps);
        if let (Err(e), None) = (&ok, &failed) {
            failed = Some(format!("step {}: {e}", k + 1));
        }
        let _ = writeln!(
            body,
            "{},{},{},{},{},{},{},{}",
            k + 1,
            t.g_out.count(),
            t.g_out.count() as f64 / size,
            t.i_family.len(),
            t.i_star.len(),
            t.b_delta_in.len(),
            t.b_delta_out.len(),
            ok.is_ok()
        );
    }
    echo.set("k0", it.k0);
    echo.set("bound", it.bound);
    write_text(out, "iteration.csv", &echo, &body)?;
    fs::write(out.join("g_final.txt"), format!("{}{}\n", header(&echo), it.g_final.to_text()))?;
    println!("k0 = {} (bound {}), final fraction {:.6}", it.k0, it.bound, it.g_final.count() as f64 / size);
    failed.map_or(Ok(()), |m| Err(Failure::Check(format!("enlargement: {m}"))))
}
