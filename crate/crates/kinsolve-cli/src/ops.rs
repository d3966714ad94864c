//! Command implementations, output formats, and the run manifest.

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kinsolve::cache::{cache_load, cache_store};
use kinsolve::metrics;
use kinsolve::solver::{self, SolverConfig, SolverMode, Trajectory};
use kinsolve::stochastic::{run_ensemble, EnsembleOutput, StochasticConfig, StochasticMethod};
use kinsolve::system::{load_system, validated, KineticSystem, TransitionFunction};
use kinsolve::tensor::{precompute, CoefficientMeta, CoefficientSet, QuadConfig};
use kinsolve::KinError;

use crate::CommonArgs;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<KinError>() {
        Some(KinError::Validation(_))
        | Some(KinError::SystemFile(_))
        | Some(KinError::Parameter(_))
        | Some(KinError::Domain(_)) => 2,
        Some(KinError::StaleCache(_)) => 3,
        Some(KinError::BlowUp { .. }) => 4,
        Some(KinError::Singular { .. }) => 5,
        _ => 1,
    }
}

#[derive(Default, Serialize)]
struct PhaseTimes {
    precompute_seconds: f64,
    solve_seconds: f64,
    io_seconds: f64,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    system: String,
    config: serde_json::Value,
    cache_path: Option<String>,
    cache_hit: Option<bool>,
    seed: u64,
    version: String,
    phases: PhaseTimes,
    total_seconds: f64,
    outputs: Vec<String>,
}

struct ManifestBuilder {
    started: Instant,
    manifest: Manifest,
}

impl ManifestBuilder {
    fn new(command: &str, common: &CommonArgs, config: serde_json::Value) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: Manifest {
                command: command.to_string(),
                system: common.system.display().to_string(),
                config,
                cache_path: None,
                cache_hit: None,
                seed: common.seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                phases: PhaseTimes::default(),
                total_seconds: 0.0,
                outputs: Vec::new(),
            },
        }
    }

    fn record_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    fn finish(mut self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        self.manifest.outputs.push(path.display().to_string());
        self.manifest.total_seconds = self.started.elapsed().as_secs_f64();
        let body = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, body)?;
        Ok(())
    }
}

fn common_config_json(common: &CommonArgs, method: Option<&str>) -> serde_json::Value {
    serde_json::json!({
        "nodes": common.nodes,
        "dt": common.dt,
        "t_final": common.t_final,
        "bins": common.bins,
        "particles": common.particles,
        "tau": common.tau,
        "theta": common.theta,
        "ensembles": common.ensembles,
        "seed": common.seed,
        "method": method,
        "rebuild": common.rebuild,
    })
}

fn resolve_cache_dir(common: &CommonArgs) -> PathBuf {
    if let Some(dir) = &common.cache_dir {
        return dir.clone();
    }
    if let Ok(env_dir) = std::env::var("KINSOLVE_CACHE_DIR") {
        if !env_dir.is_empty() {
            return PathBuf::from(env_dir);
        }
    }
    PathBuf::from("./.kinsolve-cache")
}

fn cache_file_name(sys: &KineticSystem, degree: usize) -> String {
    let hash = sys.content_hash();
    let hex: String = hash[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{hex}-n{degree}.kinc")
}

/// Load tensors from cache or compute and store them. Returns the set, the
/// cache path, whether it was a hit, and the precompute wall time.
fn ensure_tensors(
    sys: &KineticSystem,
    degree: usize,
    cache_dir: &Path,
    rebuild: bool,
) -> Result<(CoefficientSet, PathBuf, bool, f64)> {
    let quad = QuadConfig::default();
    let path = cache_dir.join(cache_file_name(sys, degree));
    let meta = CoefficientMeta {
        system_hash: sys.content_hash(),
        degree,
        quad,
    };
    if path.exists() && !rebuild {
        let started = Instant::now();
        let cs = cache_load(&path, &meta, sys.n_subsystems(), sys.rules.len())
            .with_context(|| format!("cache file {} (pass --rebuild to recompute)", path.display()))?;
        return Ok((cs, path, true, started.elapsed().as_secs_f64()));
    }
    let started = Instant::now();
    let cs = precompute(sys, degree, &quad)?;
    let elapsed = started.elapsed().as_secs_f64();
    cache_store(&cs, &path)?;
    Ok((cs, path, false, elapsed))
}

fn load_validated(common: &CommonArgs) -> Result<KineticSystem> {
    let sys = load_system(&common.system)?;
    validated(&sys)?;
    Ok(sys)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_precompute(common: &CommonArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("precompute", common, common_config_json(common, None));
    let sys = load_validated(common)?;
    fs::create_dir_all(&common.out_dir)?;
    let cache_dir = resolve_cache_dir(common);
    let (cs, path, hit, pre_s) = ensure_tensors(&sys, common.nodes, &cache_dir, common.rebuild)?;
    mb.manifest.cache_path = Some(path.display().to_string());
    mb.manifest.cache_hit = Some(hit);
    mb.manifest.phases.precompute_seconds = pre_s;
    println!(
        "tensors for degree {} ({} rules, {} stored values): {} in {:.3}s -> {}",
        common.nodes,
        cs.gain.len(),
        cs.stored_entries(),
        if hit { "cache hit" } else { "computed" },
        pre_s,
        path.display()
    );
    mb.finish(&common.out_dir)
}

fn solver_sample_every(common: &CommonArgs) -> usize {
    common
        .sample_every
        .unwrap_or_else(|| (1.0 / common.dt).round().max(1.0) as usize)
}

fn stochastic_sample_every(common: &CommonArgs) -> usize {
    common
        .sample_every
        .unwrap_or_else(|| (1.0 / common.tau).round().max(1.0) as usize)
}

fn stochastic_config(common: &CommonArgs, ensembles: usize) -> StochasticConfig {
    StochasticConfig {
        tau: common.tau,
        bins: common.bins,
        particles: common.particles,
        theta: common.theta,
        ensembles,
        seed: common.seed,
        t_final: common.t_final,
        sample_every: stochastic_sample_every(common),
    }
}

/// Uniform 200-point reconstruction grid per subsystem.
fn density_grid(sys: &KineticSystem) -> Vec<Vec<f64>> {
    sys.subsystems
        .iter()
        .map(|s| {
            (0..200)
                .map(|k| s.domain.lo + s.domain.len() * k as f64 / 199.0)
                .collect()
        })
        .collect()
}

fn write_density_mpcm(
    sys: &KineticSystem,
    traj: &Trajectory,
    out_dir: &Path,
    mb: &mut ManifestBuilder,
) -> Result<()> {
    let bases = kinsolve::tensor::make_bases(sys, traj.degree);
    let grids = density_grid(sys);
    for (i, s) in sys.subsystems.iter().enumerate() {
        let mut rows = Vec::new();
        for (k, &t) in traj.sample_times.iter().enumerate() {
            for &u in &grids[i] {
                let f = kinsolve::basis::eval_interpolant(&bases[i], &traj.states[k].a[i], u);
                rows.push(format!("{t},{u},{f}"));
            }
        }
        let path = out_dir.join(format!("density_{}.csv", s.label));
        write_csv(&path, "t,u,f", &rows)?;
        mb.record_output(&path);
    }
    Ok(())
}

fn write_density_binned(
    sys: &KineticSystem,
    ens: &EnsembleOutput,
    out_dir: &Path,
    mb: &mut ManifestBuilder,
) -> Result<()> {
    for (i, s) in sys.subsystems.iter().enumerate() {
        let mut rows = Vec::new();
        for (k, &t) in ens.sample_times.iter().enumerate() {
            for (l, &u) in ens.bin_centers[i].iter().enumerate() {
                rows.push(format!("{t},{u},{}", ens.density(k, i, l)));
            }
        }
        let path = out_dir.join(format!("density_{}.csv", s.label));
        write_csv(&path, "t,u,f", &rows)?;
        mb.record_output(&path);
    }
    Ok(())
}

fn write_moments_mpcm(
    sys: &KineticSystem,
    traj: &Trajectory,
    out_dir: &Path,
    mb: &mut ManifestBuilder,
) -> Result<()> {
    let mom = metrics::moments(traj, sys)?;
    let mut rows = Vec::new();
    for (k, &t) in mom.times.iter().enumerate() {
        for (i, s) in sys.subsystems.iter().enumerate() {
            rows.push(format!(
                "{t},{},{},{},{},{}",
                s.label, mom.m1[i][k], mom.m2[i][k], mom.var[i][k], mom.mass[i][k]
            ));
        }
    }
    let path = out_dir.join("moments.csv");
    write_csv(&path, "t,subsystem,m1,m2,var,mass", &rows)?;
    mb.record_output(&path);
    Ok(())
}

fn write_moments_binned(
    sys: &KineticSystem,
    ens: &EnsembleOutput,
    out_dir: &Path,
    mb: &mut ManifestBuilder,
) -> Result<()> {
    let mut rows = Vec::new();
    for (k, &t) in ens.sample_times.iter().enumerate() {
        for (i, s) in sys.subsystems.iter().enumerate() {
            let du = ens.bin_width[i];
            let mut m0 = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (l, &u) in ens.bin_centers[i].iter().enumerate() {
                let f = ens.density(k, i, l) * du;
                m0 += f;
                m1 += u * f;
                m2 += u * u * f;
            }
            rows.push(format!(
                "{t},{},{m1},{m2},{},{m0}",
                s.label,
                m2 - m1 * m1
            ));
        }
    }
    let path = out_dir.join("moments.csv");
    write_csv(&path, "t,subsystem,m1,m2,var,mass", &rows)?;
    mb.record_output(&path);
    Ok(())
}

pub fn cmd_simulate(common: &CommonArgs, method: &str) -> Result<()> {
    let mut mb = ManifestBuilder::new("simulate", common, common_config_json(common, Some(method)));
    let sys = load_validated(common)?;
    fs::create_dir_all(&common.out_dir)?;

    match method {
        "mpcm" | "naive" => {
            let cache_dir = resolve_cache_dir(common);
            let (cs, path, hit, pre_s) =
                ensure_tensors(&sys, common.nodes, &cache_dir, common.rebuild)?;
            mb.manifest.cache_path = Some(path.display().to_string());
            mb.manifest.cache_hit = Some(hit);
            mb.manifest.phases.precompute_seconds = pre_s;

            let mode = if method == "mpcm" {
                SolverMode::Mpcm
            } else {
                SolverMode::Naive
            };
            let cfg = SolverConfig::new(common.dt, common.t_final, mode, solver_sample_every(common))?;
            let started = Instant::now();
            let traj = solver::integrate(&sys, &cs, &cfg)?;
            mb.manifest.phases.solve_seconds = started.elapsed().as_secs_f64();

            let started = Instant::now();
            write_density_mpcm(&sys, &traj, &common.out_dir, &mut mb)?;
            write_moments_mpcm(&sys, &traj, &common.out_dir, &mut mb)?;
            mb.manifest.phases.io_seconds = started.elapsed().as_secs_f64();
            let mass_drift = traj
                .diagnostics
                .iter()
                .map(|d| (d.mass - traj.diagnostics[0].mass).abs())
                .fold(0.0f64, f64::max);
            println!(
                "{method}: {} samples, max |mass - mass(0)| = {mass_drift:.3e}",
                traj.sample_times.len()
            );
        }
        "tau" | "hybrid" => {
            let smethod = if method == "tau" {
                StochasticMethod::TauLeap
            } else {
                StochasticMethod::Hybrid
            };
            let cfg = stochastic_config(common, common.ensembles);
            let started = Instant::now();
            let ens = run_ensemble(&sys, &cfg, smethod)?;
            mb.manifest.phases.solve_seconds = started.elapsed().as_secs_f64();

            let started = Instant::now();
            write_density_binned(&sys, &ens, &common.out_dir, &mut mb)?;
            write_moments_binned(&sys, &ens, &common.out_dir, &mut mb)?;
            mb.manifest.phases.io_seconds = started.elapsed().as_secs_f64();
            println!(
                "{method}: {} replicates, {} samples, final mass {}",
                cfg.ensembles,
                ens.sample_times.len(),
                ens.total_mass(ens.sample_times.len() - 1)
            );
        }
        other => return Err(anyhow!(KinError::Parameter(format!("unknown method '{other}'")))),
    }
    mb.finish(&common.out_dir)
}

pub fn cmd_convergence(common: &CommonArgs, nodes_list: &[usize]) -> Result<()> {
    if nodes_list.is_empty() {
        return Err(anyhow!(KinError::Parameter("empty --nodes-list".into())));
    }
    if nodes_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(anyhow!(KinError::Parameter(
            "--nodes-list must be strictly ascending".into()
        )));
    }
    let mut mb = ManifestBuilder::new("convergence", common, common_config_json(common, None));
    let sys = load_validated(common)?;
    fs::create_dir_all(&common.out_dir)?;

    let cfg = SolverConfig::new(
        common.dt,
        common.t_final,
        SolverMode::Mpcm,
        solver_sample_every(common),
    )?;
    let quad = QuadConfig::default();

    // Tensors are computed fresh here (no cache) so the recorded phase
    // times reflect the actual cost at each resolution.
    let mut runs: std::collections::BTreeMap<usize, (Trajectory, f64, f64)> =
        std::collections::BTreeMap::new();
    let mut run_at = |degree: usize,
                      runs: &mut std::collections::BTreeMap<usize, (Trajectory, f64, f64)>|
     -> Result<()> {
        if runs.contains_key(&degree) {
            return Ok(());
        }
        let started = Instant::now();
        let cs = precompute(&sys, degree, &quad)?;
        let pre_s = started.elapsed().as_secs_f64();
        let started = Instant::now();
        let traj = solver::integrate(&sys, &cs, &cfg)?;
        let solve_s = started.elapsed().as_secs_f64();
        runs.insert(degree, (traj, pre_s, solve_s));
        Ok(())
    };

    let mut rows = Vec::new();
    for &degree in nodes_list {
        run_at(degree, &mut runs)?;
        run_at(2 * degree, &mut runs)?;
        let (coarse, pre_s, solve_s) = {
            let r = &runs[&degree];
            (r.0.clone(), r.1, r.2)
        };
        let fine = &runs[&(2 * degree)].0;
        let metric = metrics::self_convergence(&coarse, fine, &sys)?;
        mb.manifest.phases.precompute_seconds += pre_s;
        mb.manifest.phases.solve_seconds += solve_s;
        rows.push(format!("{degree},{metric},{pre_s},{solve_s}"));
        println!("N={degree}: self-convergence {metric:.6e} (pre {pre_s:.3}s, solve {solve_s:.3}s)");
    }
    // The doubled runs' costs go into the precompute/solve phases as well.
    for (&degree, &(_, pre_s, solve_s)) in runs.iter() {
        if !nodes_list.contains(&degree) {
            mb.manifest.phases.precompute_seconds += pre_s;
            mb.manifest.phases.solve_seconds += solve_s;
        }
    }

    let started = Instant::now();
    let path = common.out_dir.join("convergence.csv");
    write_csv(
        &path,
        "nodes,self_convergence,precompute_seconds,solve_seconds",
        &rows,
    )?;
    mb.record_output(&path);
    mb.manifest.phases.io_seconds = started.elapsed().as_secs_f64();
    mb.finish(&common.out_dir)
}

pub fn cmd_compare(common: &CommonArgs, ensembles_list: &[usize]) -> Result<()> {
    if ensembles_list.is_empty() {
        return Err(anyhow!(KinError::Parameter("empty --ensembles-list".into())));
    }
    let mut mb = ManifestBuilder::new("compare", common, common_config_json(common, None));
    let sys = load_validated(common)?;
    fs::create_dir_all(&common.out_dir)?;

    // Common sampling lattice: four intervals across [0, T].
    let interval = common.t_final / 4.0;
    let se_solver = (interval / common.dt).round().max(1.0) as usize;
    let se_stoch = (interval / common.tau).round().max(1.0) as usize;

    let cache_dir = resolve_cache_dir(common);
    let (cs, path, hit, pre_s) = ensure_tensors(&sys, common.nodes, &cache_dir, common.rebuild)?;
    mb.manifest.cache_path = Some(path.display().to_string());
    mb.manifest.cache_hit = Some(hit);
    mb.manifest.phases.precompute_seconds = pre_s;

    let cfg = SolverConfig::new(common.dt, common.t_final, SolverMode::Mpcm, se_solver)?;
    let started = Instant::now();
    let traj = solver::integrate(&sys, &cs, &cfg)?;
    let mpcm_wall = started.elapsed().as_secs_f64();
    mb.manifest.phases.solve_seconds += mpcm_wall;

    let mut rows = vec![format!("mpcm,1,0,{mpcm_wall}")];
    for &m in ensembles_list {
        for (name, method) in [("tau", StochasticMethod::TauLeap), ("hybrid", StochasticMethod::Hybrid)] {
            let mut scfg = stochastic_config(common, m);
            scfg.sample_every = se_stoch;
            let started = Instant::now();
            let ens = run_ensemble(&sys, &scfg, method)?;
            let wall = started.elapsed().as_secs_f64();
            mb.manifest.phases.solve_seconds += wall;
            let d = metrics::difference_metric(&traj, &sys, &ens)?;
            rows.push(format!("{name},{m},{d},{wall}"));
            println!("{name} M={m}: D = {d:.6e}, wall {wall:.3}s");
        }
    }

    let started = Instant::now();
    let path = common.out_dir.join("compare.csv");
    write_csv(&path, "method,ensembles,difference,wall_seconds", &rows)?;
    mb.record_output(&path);
    mb.manifest.phases.io_seconds = started.elapsed().as_secs_f64();
    mb.finish(&common.out_dir)
}

fn override_gamma(sys: &mut KineticSystem, rule_sel: &str, value: f64) -> Result<()> {
    let indices: Vec<usize> = if rule_sel == "all" {
        (0..sys.rules.len()).collect()
    } else {
        vec![rule_sel
            .parse::<usize>()
            .map_err(|_| anyhow!(KinError::Parameter(format!("bad rule selector '{rule_sel}'"))))?]
    };
    let mut touched = 0;
    for idx in indices {
        let rule = sys
            .rules
            .get_mut(idx)
            .ok_or_else(|| anyhow!(KinError::Parameter(format!("rule {idx} out of range"))))?;
        match &mut rule.phi {
            TransitionFunction::Left { gamma }
            | TransitionFunction::Right { gamma }
            | TransitionFunction::AwayFrom { gamma, .. }
            | TransitionFunction::Toward { gamma, .. } => {
                *gamma = value;
                touched += 1;
            }
            _ => {}
        }
    }
    if touched == 0 {
        return Err(anyhow!(KinError::Parameter(
            "no rule with a gamma parameter matched the selector".into()
        )));
    }
    Ok(())
}

pub fn cmd_sweep(
    common: &CommonArgs,
    param: &str,
    values: &[f64],
    rule: &str,
    method: &str,
) -> Result<()> {
    if param != "gamma" {
        return Err(anyhow!(KinError::Parameter(format!(
            "unsupported sweep parameter '{param}' (only gamma)"
        ))));
    }
    if values.is_empty() {
        return Err(anyhow!(KinError::Parameter("empty --values".into())));
    }
    let mut mb = ManifestBuilder::new("sweep", common, common_config_json(common, Some(method)));
    let base = load_system(&common.system)?;
    fs::create_dir_all(&common.out_dir)?;

    let mut rows = Vec::new();
    for &v in values {
        let sub_dir = common.out_dir.join(format!("gamma_{v}"));
        let run = (|| -> Result<()> {
            let mut sys = base.clone();
            override_gamma(&mut sys, rule, v)?;
            validated(&sys)?;
            // Write the modified system so the nested simulate is a plain
            // recursive invocation over files.
            fs::create_dir_all(&sub_dir)?;
            let sys_path = sub_dir.join("system.toml");
            fs::write(&sys_path, render_system(&sys))?;
            let mut sub = common.clone();
            sub.system = sys_path;
            sub.out_dir = sub_dir.clone();
            cmd_simulate(&sub, method)
        })();
        match run {
            Ok(()) => rows.push(format!("{v},ok,{}", sub_dir.display())),
            Err(err) => {
                println!("gamma={v}: failed: {err:#}");
                rows.push(format!("{v},failed,\"{}\"", first_line(&format!("{err:#}"))));
            }
        }
    }
    let path = common.out_dir.join("sweep.csv");
    write_csv(&path, "value,status,detail", &rows)?;
    mb.record_output(&path);
    mb.finish(&common.out_dir)
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").replace('"', "'")
}

/// Render a system back to the TOML description format.
fn render_system(sys: &KineticSystem) -> String {
    use kinsolve::system::{ComponentShape, EncounterRate};
    let mut out = String::new();
    for s in &sys.subsystems {
        out.push_str(&format!(
            "[[subsystems]]\nlabel = \"{}\"\nlo = {:?}\nhi = {:?}\n\n",
            s.label, s.domain.lo, s.domain.hi
        ));
        for c in &s.initial {
            out.push_str("[[subsystems.initial]]\n");
            match &c.shape {
                ComponentShape::TruncatedGaussian { mu, sigma } => {
                    out.push_str(&format!("shape = \"gaussian\"\nmu = {mu:?}\nsigma = {sigma:?}\n"))
                }
                ComponentShape::Uniform => out.push_str("shape = \"uniform\"\n"),
                ComponentShape::PointMass { mu, width } => {
                    out.push_str(&format!("shape = \"point\"\nmu = {mu:?}\nwidth = {width:?}\n"))
                }
            }
            out.push_str(&format!("mass = {:?}\n\n", c.mass));
        }
    }
    for r in &sys.rules {
        out.push_str(&format!(
            "[[rules]]\nsource = \"{}\"\npartner = \"{}\"\ntarget = \"{}\"\n",
            sys.subsystems[r.source].label,
            sys.subsystems[r.partner].label,
            sys.subsystems[r.target].label
        ));
        match &r.phi {
            TransitionFunction::Left { gamma } => {
                out.push_str(&format!("family = \"left\"\ngamma = {gamma:?}\n"))
            }
            TransitionFunction::Right { gamma } => {
                out.push_str(&format!("family = \"right\"\ngamma = {gamma:?}\n"))
            }
            TransitionFunction::AwayFrom { gamma, a } => out.push_str(&format!(
                "family = \"away\"\ngamma = {gamma:?}\na = {a:?}\n"
            )),
            TransitionFunction::Toward { gamma, a } => out.push_str(&format!(
                "family = \"toward\"\ngamma = {gamma:?}\na = {a:?}\n"
            )),
            TransitionFunction::Identity => out.push_str("family = \"identity\"\n"),
            TransitionFunction::PiecewiseBilinear { pieces } => {
                out.push_str("family = \"piecewise\"\n");
                for p in pieces {
                    out.push_str(&format!(
                        "[[rules.pieces]]\nx_lo = {:?}\nx_hi = {:?}\ny_lo = {:?}\ny_hi = {:?}\nc00 = {:?}\nc10 = {:?}\nc01 = {:?}\nc11 = {:?}\n",
                        p.x_lo, p.x_hi, p.y_lo, p.y_hi, p.c00, p.c10, p.c01, p.c11
                    ));
                }
            }
        }
        match &r.eta {
            EncounterRate::Constant(c) => out.push_str(&format!("eta = {c:?}\n\n")),
            EncounterRate::Bilinear { c00, c10, c01, c11 } => out.push_str(&format!(
                "eta = {{ c00 = {c00:?}, c10 = {c10:?}, c01 = {c01:?}, c11 = {c11:?} }}\n\n"
            )),
        }
    }
    out
}
