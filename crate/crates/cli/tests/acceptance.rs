//! Acceptance run: one PASS/FAIL line per criterion, then the oracle suite.
//!
//! Built with `harness = false` so the lines are printed on every run.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use fredholm_core::opdsl::file::LambdaGrid;
use fredholm_core::sampling::class_fixtures;
use fredholm_lab::validate::homomorphism_check;
use fredholm_lab::{cmd_check, cmd_essspec, cmd_geom, cmd_limits, load, Input, Settings};
use num_complex::Complex64;
use serde_json::Value;

const CERT_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 5e-2;
const WITNESS_TOL: f64 = 1e-12;
const HVZ_BUDGET: Duration = Duration::from_secs(60);
const PAIRS: usize = 100;
const SEED: u64 = 20_240_601;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> Input {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../operators").join(name);
    load(&p).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn at_lambda(l: f64) -> Settings {
    Settings { lambda: Some(Complex64::new(l, 0.0)), ..Settings::default() }
}

fn grid(start: f64, stop: f64, step: f64) -> Settings {
    Settings { lambda_grid: Some(LambdaGrid { start, stop, step }), ..Settings::default() }
}

fn payload(r: Result<fredholm_lab::report::Report, fredholm_lab::CliError>) -> Result<Value, String> {
    r.map(|r| r.payload).map_err(|e| e.to_string())
}

fn validate(input: &Input, s: &Settings) -> Result<(Value, usize), String> {
    fredholm_lab::validate::cmd_validate(input, s).map(|r| (r.payload, r.disagreements)).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn lowest_interval(spectrum: &Value) -> Option<&Value> {
    spectrum["items"]
        .as_array()?
        .iter()
        .filter(|i| i["kind"] == "interval")
        .min_by(|a, b| f(&a["lo"]).total_cmp(&f(&b["lo"])))
}

fn certified(status: &Value) -> bool {
    matches!(status["kind"].as_str(), Some("exact" | "numerically_certified"))
}

fn results(check: &Value) -> Vec<String> {
    check["verdicts"]
        .as_array()
        .map_or(vec![], |vs| vs.iter().map(|v| v["result"].as_str().unwrap_or("").to_string()).collect())
}

fn hvz() -> Outcome {
    let t0 = Instant::now();
    let input = fixture("hvz_step.op");
    let ess = payload(cmd_essspec(&input, &Settings::default()))?;
    let item = lowest_interval(&ess["spectrum"]).ok_or("engine: no interval")?;
    let bottom = f(&item["lo"]);
    ensure((bottom - 1.0).abs() <= CERT_TOL, format!("engine bottom {bottom}"))?;
    ensure(certified(&item["status"]) && item["extends_above"] == true, format!("engine item {item}"))?;

    let (val, dis) = validate(&input, &Settings::default())?;
    let params = &val["oracle_params"];
    ensure(f(&params["h"]) == 0.01, format!("oracle h {}", params["h"]))?;
    let max_box = params["boxes"].as_array().map_or(0.0, |b| b.iter().map(f).fold(0.0, f64::max));
    ensure(max_box == 80.0, format!("oracle boxes {}", params["boxes"]))?;
    let oracle = lowest_interval(&val["spectrum"]["oracle"]).ok_or("oracle: no interval")?;
    let obottom = f(&oracle["lo"]);
    ensure((obottom - 1.0).abs() <= ORACLE_TOL, format!("oracle bottom {obottom}"))?;
    ensure(dis == 0, format!("{dis} disagreements"))?;

    let step = 0.05;
    let chk = payload(cmd_check(&input, &grid(0.0, 2.0, step)))?;
    let flips = chk["flips"].as_array().cloned().unwrap_or_default();
    ensure(flips.len() == 1, format!("flips {flips:?}"))?;
    let (a, b) = (f(&flips[0]["at"]), f(&flips[0]["next"]));
    ensure(flips[0]["from"] == "fredholm" && flips[0]["to"] == "not_fredholm", format!("flip {}", flips[0]))?;
    ensure(a < 1.0 && 1.0 - a <= step + 1e-12 && (b - 1.0).abs() <= 1e-12, format!("flip between {a} and {b}"))?;

    let dt = t0.elapsed();
    ensure(dt < HVZ_BUDGET, format!("took {dt:?}"))?;
    Ok(format!("engine bottom {bottom}, oracle bottom {obottom:.4}, flip {a} -> {b}, {:.1}s", dt.as_secs_f64()))
}

fn cylinders() -> Outcome {
    let mut seen = Vec::new();
    for (file, c) in [("cylinder_c0.op", 0.0), ("cylinder_c1.op", 1.0), ("cylinder_cm2.op", -2.0)] {
        let input = fixture(file);
        let ess = payload(cmd_essspec(&input, &Settings::default()))?;
        let item = lowest_interval(&ess["spectrum"]).ok_or(format!("{file}: no engine interval"))?;
        let lo = f(&item["lo"]);
        ensure((lo - c).abs() <= CERT_TOL && item["extends_above"] == true, format!("{file}: engine {item}"))?;
        let (val, dis) = validate(&input, &at_lambda(c - 1.0))?;
        let o = lowest_interval(&val["spectrum"]["oracle"]).ok_or(format!("{file}: no oracle interval"))?;
        let olo = f(&o["lo"]);
        ensure((olo - c).abs() <= ORACLE_TOL, format!("{file}: oracle bottom {olo}"))?;
        ensure(dis == 0, format!("{file}: {dis} disagreements"))?;
        seen.push(format!("c={c}: {olo:.3}"));
    }
    Ok(format!("engine [c, inf) for each c; oracle {}", seen.join(", ")))
}

fn b_indicial() -> Outcome {
    let input = fixture("b_indicial.op");
    let lim = payload(cmd_limits(&input, &Settings::default()))?;
    let ops = lim["limit_operators"].as_array().cloned().unwrap_or_default();
    ensure(ops.len() == 2, format!("{} limit operators", ops.len()))?;
    for l in &ops {
        ensure(l["operator"] == "X0*X0", format!("{}: {}", l["stratum"], l["operator"]))?;
        let g = &l["generators"][0];
        ensure(g["name"] == "xdx" && g["role"] == "ghost X0", format!("{}: generator {g}", l["stratum"]))?;
    }
    for (l, want) in [(1.0, "fredholm"), (-1.0, "not_fredholm"), (0.0, "not_fredholm")] {
        let chk = payload(cmd_check(&input, &at_lambda(l)))?;
        let got = results(&chk);
        ensure(got == [want], format!("lambda {l}: {got:?}"))?;
    }
    let (val, dis) = validate(&input, &Settings::default())?;
    let rows = val["rows"].as_array().cloned().unwrap_or_default();
    let agree = rows.iter().filter(|r| r["agreement"]["kind"] == "agree").count();
    ensure(dis == 0 && agree == rows.len(), format!("{agree}/{} rows agree, {dis} disagreements", rows.len()))?;
    Ok(format!("X0*X0 at x=0 and x=1, verdicts as expected, {agree} trend rows agree"))
}

fn tanh_mult() -> Outcome {
    let input = fixture("tanh_mult.op");
    let ess = payload(cmd_essspec(&input, &Settings::default()))?;
    let item = lowest_interval(&ess["spectrum"]).ok_or("no engine interval")?;
    let (lo, hi) = (f(&item["lo"]), f(&item["hi"]));
    ensure((lo + 1.0).abs() <= CERT_TOL && (hi - 1.0).abs() <= CERT_TOL, format!("engine [{lo}, {hi}]"))?;
    let (val, dis) = validate(&input, &Settings::default())?;
    let items = val["spectrum"]["oracle"]["items"].as_array().cloned().unwrap_or_default();
    let olo = items.iter().map(|i| f(&i["lo"])).fold(f64::INFINITY, f64::min);
    let ohi = items.iter().map(|i| f(&i["hi"])).fold(f64::NEG_INFINITY, f64::max);
    ensure((olo + 1.0).abs() <= ORACLE_TOL && (ohi - 1.0).abs() <= ORACLE_TOL, format!("oracle [{olo}, {ohi}]"))?;
    ensure(dis == 0, format!("{dis} disagreements"))?;
    Ok(format!("engine [{lo}, {hi}], oracle [{olo:.4}, {ohi:.4}]"))
}

fn homomorphism() -> Outcome {
    let mut total = 0;
    let mut names = Vec::new();
    for fx in class_fixtures() {
        let chk = homomorphism_check(&fx.space.id, SEED, PAIRS).ok_or(format!("{}: no fixture", fx.name))?;
        ensure(chk.pairs == PAIRS, format!("{}: {} pairs", fx.name, chk.pairs))?;
        ensure(chk.failures.is_empty(), format!("{}: {:?}", fx.name, chk.failures))?;
        total += chk.pairs;
        names.push(fx.name);
    }
    Ok(format!("{total} pairs over {} classes ({}), 0 failures", names.len(), names.join(" ")))
}

fn roles(input: &Input) -> Result<Vec<(String, Vec<(String, String)>)>, String> {
    let lim = payload(cmd_limits(input, &Settings::default()))?;
    Ok(lim["limit_operators"]
        .as_array()
        .cloned()
        .unwrap_or_default()
        .iter()
        .map(|l| {
            let gens = l["generators"].as_array().cloned().unwrap_or_default();
            let gens =
                gens.iter().map(|g| (g["name"].as_str().unwrap_or("").into(), g["role"].as_str().unwrap_or("").into()));
            (l["stratum"].as_str().unwrap_or("").to_string(), gens.collect())
        })
        .collect())
}

fn ghosts() -> Outcome {
    let edge = roles(&fixture("edge_circle.op"))?;
    ensure(edge.len() == 1, format!("edge: {} strata", edge.len()))?;
    let (ghost, orbit): (Vec<_>, Vec<_>) = edge[0].1.iter().partition(|(_, r)| r.starts_with("ghost"));
    let mut ghost: Vec<&str> = ghost.iter().map(|(n, _)| n.as_str()).collect();
    ghost.sort();
    let orbit: Vec<&str> = orbit.iter().map(|(n, _)| n.as_str()).collect();
    ensure(ghost == ["xdx", "xdz"] && orbit == ["dy"], format!("edge: ghosts {ghost:?}, orbit {orbit:?}"))?;

    for (stratum, gens) in roles(&fixture("b_square.op"))? {
        let faces: Vec<&str> = stratum.split(',').map(|s| s.split('=').next().unwrap_or("")).collect();
        for (name, role) in gens {
            let want_ghost = faces.contains(&&name[..1]);
            ensure(role.starts_with("ghost") == want_ghost, format!("b-square {stratum}: {name} is {role}"))?;
        }
    }
    for file in ["hvz_step.op", "sc2_potential.op"] {
        for (stratum, gens) in roles(&fixture(file))? {
            ensure(gens.iter().all(|(_, r)| r.starts_with("ghost")), format!("{file} {stratum}: {gens:?}"))?;
        }
    }
    Ok("edge ghosts {xdx, xdz}, orbit {dy}; b-square and sc frames classify per face".into())
}

fn non_amenable() -> Outcome {
    let input = fixture("bad_isotropy.op");
    let chk = payload(cmd_check(&input, &Settings::default()))?;
    let v = &chk["verdicts"][0];
    ensure(v["result"] == "indeterminate", format!("result {}", v["result"]))?;
    let reason = v["reasons"][0].as_str().unwrap_or("");
    ensure(reason.starts_with("limit-criterion not justified"), format!("reason `{reason}`"))?;
    Ok(format!("indeterminate: {reason}"))
}

fn lightcone() -> Outcome {
    let chk = payload(cmd_check(&fixture("lightcone.op"), &Settings::default()))?;
    let v = &chk["verdicts"][0];
    ensure(v["result"] == "not_fredholm", format!("result {}", v["result"]))?;
    let xi = &v["ellipticity"]["witness"]["xi"];
    let (a, b) = (f(&xi[0]).abs(), f(&xi[1]).abs());
    ensure((a - b).abs() <= WITNESS_TOL, format!("witness xi {xi}"))?;
    Ok(format!("not_fredholm, witness |xi_x| - |xi_y| = {:.1e}", (a - b).abs()))
}

fn blowups() -> Outcome {
    let geom = payload(cmd_geom(&fixture("disk_blowup.op"), &Settings::default()))?;
    let strata = geom["strata"].as_array().cloned().unwrap_or_default();
    let sp = strata.iter().find(|s| s["id"] == "S[p]").ok_or("disk: no S[p]")?;
    ensure(
        sp["depth"] == 1 && sp["isotropy"] == "R" && sp["vanishing"] == serde_json::json!(["rpdr"]),
        format!("disk: S[p] {sp}"),
    )?;
    let blown = geom["blowups"][0]["new_hyperfaces"].as_array().cloned().unwrap_or_default();
    ensure(blown.iter().any(|h| h == "S[p]"), format!("disk: new hyperfaces {blown:?}"))?;

    let geom = payload(cmd_geom(&fixture("cylinder_curve.op"), &Settings::default()))?;
    let filt = geom["filtration"].as_array().cloned().unwrap_or_default();
    ensure(filt.len() == 3, format!("curve: filtration {filt:?}"))?;
    let strata = geom["strata"].as_array().cloned().unwrap_or_default();
    let corner = "(U1 \\ U0)^2 x R+*";
    let faces: Vec<&Value> = strata.iter().filter(|s| s["groupoid"] == corner).collect();
    ensure(!faces.is_empty(), format!("curve: no stratum with groupoid {corner}"))?;
    Ok(format!("S[p] b-type with isotropy R; curve filtration of 3 sets, {} strata with {corner}", faces.len()))
}

fn semidirect() -> Outcome {
    let mut out = Vec::new();
    for file in ["edge_circle.op", "ah_circle.op"] {
        let input = fixture(file);
        let (val, dis) = validate(&input, &at_lambda(0.0))?;
        let rows = val["rows"].as_array().cloned().unwrap_or_default();
        ensure(!rows.is_empty(), format!("{file}: no rows"))?;
        for r in &rows {
            ensure(r["engine_status"]["kind"] == "approximate", format!("{file}: status {}", r["engine_status"]))?;
            ensure(r["agreement"]["kind"] == "not_comparable", format!("{file}: agreement {}", r["agreement"]))?;
        }
        ensure(dis == 0, format!("{file}: {dis} disagreements"))?;
        out.push(format!("{file} {} rows", rows.len()));
    }
    Ok(format!("approximate and not comparable: {}", out.join(", ")))
}

fn suite() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../operators");
    let mut files: Vec<PathBuf> =
        std::fs::read_dir(&dir).map_err(|e| e.to_string())?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    let (mut run, mut agree, mut not_cmp, mut dis) = (0, 0, 0, 0);
    for p in files {
        let input = load(&p).map_err(|e| e.to_string())?;
        if input.file.op.is_none() {
            continue;
        }
        let (val, d) = validate(&input, &Settings::default())?;
        run += 1;
        dis += d;
        for r in val["rows"].as_array().cloned().unwrap_or_default() {
            match r["agreement"]["kind"].as_str() {
                Some("agree") => agree += 1,
                Some("not_comparable") => not_cmp += 1,
                _ => {}
            }
        }
        if d > 0 {
            eprintln!("  {}: {d} disagreements", input.name);
        }
    }
    ensure(run >= 10, format!("only {run} operator fixtures"))?;
    ensure(dis == 0, format!("{dis} certified disagreements"))?;
    Ok(format!("{run} fixtures, {agree} agree, {not_cmp} not comparable, 0 disagreements"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1", hvz),
        ("2", cylinders),
        ("3", b_indicial),
        ("4", tanh_mult),
        ("5", homomorphism),
        ("6", ghosts),
        ("7", non_amenable),
        ("8", lightcone),
        ("9", blowups),
        ("10", semidirect),
        ("suite", suite),
    ];
    let mut failed = 0;
    for (id, run) in criteria {
        let t = Instant::now();
        let out = run();
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(msg) => println!("criterion {id}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id}: FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
