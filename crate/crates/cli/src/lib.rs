//! Commands behind the `fredholm-lab` binary. Each returns a [`Report`]
//! rendered as text, JSON or CSV by the caller.

pub mod report;
pub mod validate;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde_json::{json, Value};

use fredholm_core::calculus::Resolution;
use fredholm_core::limits::all_limit_operators;
use fredholm_core::opdsl::file::{parse_operator_file, LambdaGrid, OperatorFile};
use fredholm_core::spectral::{
    essential_spectrum, fredholm_verdict, ItemKind, SpectralResolution, SpectrumApprox, Verdict, VerdictOptions,
    VerdictResult,
};

use report::{complex, csv_row, num};
pub use report::{Format, InputEcho, Report};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, unparsable or invalid input (exit code 2).
    Input(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => f.write_str(m),
        }
    }
}

/// Flags shared by the commands; unset values fall back to the file's
/// `query` blocks, then to built-in defaults.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub lambda: Option<Complex64>,
    pub lambda_grid: Option<LambdaGrid>,
    pub window: Option<(f64, f64)>,
    pub resolution: Option<usize>,
    pub allow_unjustified: bool,
    pub seed: Option<u64>,
    /// Replace engine verdicts by a fixed certified "Fredholm" (harness
    /// self-test).
    pub stub_engine: bool,
}

pub const DEFAULT_WINDOW: (f64, f64) = (-10.0, 10.0);

/// A loaded operator file with its display name.
pub struct Input {
    pub name: String,
    pub file: OperatorFile,
}

pub fn load(path: &Path) -> Result<Input, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: cannot read: {e}", path.display())))?;
    let file = parse_operator_file(&text).map_err(|e| CliError::Input(format!("{}:{e}", path.display())))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Input { name, file })
}

impl Input {
    pub(crate) fn echo(&self) -> InputEcho {
        let op = self.file.op.as_ref();
        InputEcho {
            file: self.name.clone(),
            geometry: self.file.space.id.clone(),
            class: self.file.space.class.short_name().to_string(),
            operator: op.map(|p| p.to_string()),
            order: op.map(|p| p.order),
            size: op.map(|p| p.size),
        }
    }

    fn operator(&self) -> Result<&fredholm_core::calculus::DiffOp, CliError> {
        self.file.operator().map_err(|e| CliError::Input(format!("{}:{e}", self.name)))
    }

    fn allow_unjustified(&self, s: &Settings) -> bool {
        s.allow_unjustified || self.file.queries.iter().any(|q| q.allow_unjustified)
    }

    /// Lambdas from the flags, else from the file, else `0`. Sorted by real
    /// then imaginary part.
    pub fn lambdas(&self, s: &Settings) -> Vec<Complex64> {
        let from_grid = |g: &LambdaGrid| g.points().into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        let mut out: Vec<Complex64> = if let Some(l) = s.lambda {
            vec![l]
        } else if let Some(g) = &s.lambda_grid {
            from_grid(g)
        } else if let Some(q) = self.file.queries.iter().find(|q| q.lambda.is_some() || q.lambda_grid.is_some()) {
            match (&q.lambda_grid, q.lambda) {
                (Some(g), _) => from_grid(g),
                (None, Some(l)) => vec![Complex64::new(l[0], l[1])],
                _ => unreachable!(),
            }
        } else {
            vec![Complex64::new(0.0, 0.0)]
        };
        out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        out
    }

    /// Single lambda for `check` without flags: `--lambda`, the file's
    /// `lambda`, its grid, or `0`.
    fn check_lambdas(&self, s: &Settings) -> Vec<Complex64> {
        if s.lambda.is_some() || s.lambda_grid.is_some() {
            return self.lambdas(s);
        }
        match self.file.queries.iter().find_map(|q| q.lambda) {
            Some(l) => vec![Complex64::new(l[0], l[1])],
            None => self.lambdas(s),
        }
    }

    pub fn window(&self, s: &Settings) -> (f64, f64) {
        s.window.or_else(|| self.file.queries.iter().find_map(|q| q.window)).unwrap_or(DEFAULT_WINDOW)
    }

    pub fn spectral_resolution(&self, s: &Settings) -> SpectralResolution {
        let n = s.resolution.or_else(|| self.file.queries.iter().find_map(|q| q.resolution));
        resolution_from(n)
    }

    pub fn verdict_options(&self, s: &Settings) -> VerdictOptions {
        VerdictOptions {
            allow_unjustified: self.allow_unjustified(s),
            ellipticity: Resolution::default(),
            spectral: self.spectral_resolution(s),
        }
    }
}

/// `--resolution n`: `n` covariable grid points for one covariable, and
/// `sqrt(n)` (odd, at least 17) per axis for two.
pub fn resolution_from(n: Option<usize>) -> SpectralResolution {
    let mut r = SpectralResolution::default();
    if let Some(n) = n {
        r.grid_1d = n.max(17);
        r.grid_2d = (((n as f64).sqrt() as usize) | 1).max(17);
    }
    r
}

fn finish(command: &'static str, input: &Input, payload: Value, text: String, csv: String, t0: Instant) -> Report {
    Report {
        command,
        input: input.echo(),
        payload,
        text,
        csv,
        indeterminate: false,
        disagreements: 0,
        timing_ms: t0.elapsed().as_millis(),
    }
}

pub fn cmd_geom(input: &Input, _s: &Settings) -> Result<Report, CliError> {
    let t0 = Instant::now();
    let space = &input.file.space;
    let check = space.is_fredholm_groupoid();
    let mut text = String::new();
    let mut csv = csv_row(
        &["stratum", "depth", "dimension", "components", "orbit_base", "fiber", "isotropy", "amenable", "groupoid"]
            .map(String::from),
    );
    let _ = writeln!(text, "space {} (class {}, dimension {})", space.id, space.class.short_name(), space.ambient_dim);
    let _ = writeln!(text, "strata:");
    let mut strata = Vec::new();
    for st in &space.strata {
        let _ = writeln!(
            text,
            "  {:<14} depth {}  dim {}  orbit base {:<16} fiber {:<16} isotropy {:<22} groupoid {}",
            st.id, st.depth, st.dimension, st.orbit_base, st.fiber, st.isotropy, st.groupoid
        );
        csv.push_str(&csv_row(&[
            st.id.clone(),
            st.depth.to_string(),
            st.dimension.to_string(),
            st.components.to_string(),
            st.orbit_base.to_string(),
            st.fiber.to_string(),
            st.isotropy.to_string(),
            st.isotropy.is_amenable().to_string(),
            st.groupoid.clone(),
        ]));
        strata.push(json!({
            "id": st.id,
            "depth": st.depth,
            "dimension": st.dimension,
            "components": st.components,
            "orbit_base": st.orbit_base.to_string(),
            "fiber": st.fiber.to_string(),
            "isotropy": st.isotropy.to_string(),
            "isotropy_dim": st.isotropy.dim(),
            "amenable": st.isotropy.is_amenable(),
            "groupoid": st.groupoid,
            "frame": st.frame.generators,
            "vanishing": st.frame.vanishing,
        }));
    }
    let filtration = space.filtration();
    if !space.blowups.is_empty() {
        let _ = writeln!(text, "blow-ups:");
        for b in &space.blowups {
            let _ = writeln!(
                text,
                "  {:?} in {} -> new hyperfaces {:?}, depth {}",
                b.center, b.parent, b.new_hyperfaces, b.depth
            );
        }
    }
    let _ = writeln!(text, "filtration:");
    for (k, level) in filtration.iter().enumerate() {
        let _ = writeln!(text, "  U{k} \\ U{}: {}", k.max(1) - 1, level.join(", "));
    }
    match (&check.holds, &check.failing_stratum) {
        (true, _) => {
            let _ = writeln!(text, "Fredholm-groupoid predicate: holds");
        }
        (false, st) => {
            let _ = writeln!(
                text,
                "Fredholm-groupoid predicate: FAILS at stratum {} ({})",
                st.as_deref().unwrap_or("?"),
                check.reason.as_deref().unwrap_or("")
            );
        }
    }
    for n in &space.notes {
        let _ = writeln!(text, "note: {n}");
    }
    let blowups: Vec<Value> = space
        .blowups
        .iter()
        .map(|b| json!({"center": format!("{:?}", b.center), "parent": b.parent, "new_hyperfaces": b.new_hyperfaces, "depth": b.depth}))
        .collect();
    let payload = json!({
        "space": space.id,
        "class": space.class.short_name(),
        "ambient_dim": space.ambient_dim,
        "max_depth": space.max_depth(),
        "boundary_strata": space.boundary_strata().count(),
        "strata": strata,
        "blowups": blowups,
        "filtration": filtration,
        "predicate": check,
        "notes": space.notes,
    });
    Ok(finish("geom", input, payload, text, csv, t0))
}

pub fn cmd_limits(input: &Input, s: &Settings) -> Result<Report, CliError> {
    let t0 = Instant::now();
    let p = input.operator()?;
    let check = p.frame.space.is_fredholm_groupoid();
    let limits = all_limit_operators(p, true).map_err(|e| CliError::Input(format!("{}: {e}", input.name)))?;
    let mut text = String::new();
    let mut csv = csv_row(&["stratum", "carrier", "group", "generator", "role", "operator"].map(String::from));
    if !check.holds {
        let _ = writeln!(
            text,
            "warning: limit-criterion not justified (stratum {}); operators listed for inspection only\n",
            check.failing_stratum.as_deref().unwrap_or("?")
        );
    }
    let mut items = Vec::new();
    let mut sorted: Vec<_> = limits.iter().collect();
    sorted.sort_by(|a, b| a.stratum.cmp(&b.stratum));
    for l in sorted {
        let listing = l.listing();
        let _ = writeln!(text, "{}: carrier {}, ghost group {}", l.stratum, l.carrier(), l.group);
        let _ = writeln!(text, "  P = {listing}");
        let classes = l.classification();
        let roles: Vec<String> = classes.iter().map(|(g, r)| format!("{g}: {r}")).collect();
        let _ = writeln!(text, "  generators: {}", roles.join(", "));
        if !l.base_samples.is_empty() {
            let _ = writeln!(text, "  varies over the orbit base; {} base samples", l.base_samples.len());
        }
        for (g, r) in &classes {
            csv.push_str(&csv_row(&[
                l.stratum.clone(),
                l.carrier(),
                l.group.to_string(),
                g.clone(),
                r.clone(),
                listing.clone(),
            ]));
        }
        items.push(json!({
            "stratum": l.stratum,
            "carrier": l.carrier(),
            "group": l.group.to_string(),
            "abelian": l.group.is_abelian(),
            "operator": listing,
            "generators": classes.iter().map(|(g, r)| json!({"name": g, "role": r})).collect::<Vec<_>>(),
            "depends_on_base": l.depends_on_base(),
            "base_samples": l.base_samples.len(),
        }));
    }
    let _ = s;
    let payload = json!({"predicate": check, "count": items.len(), "limit_operators": items});
    Ok(finish("limits", input, payload, text, csv, t0))
}

/// Engine verdicts over `lambdas`, in the given order.
pub fn engine_verdicts(
    p: &fredholm_core::calculus::DiffOp,
    lambdas: &[Complex64],
    opts: &VerdictOptions,
    stub: bool,
) -> Vec<Verdict> {
    lambdas
        .par_iter()
        .map(|&l| {
            let mut v = fredholm_verdict(p, l, p.sobolev, opts);
            if stub {
                v.result = VerdictResult::Fredholm;
                v.status = fredholm_core::calculus::Status::NumericallyCertified { tol: 1e-9 };
                v.reasons = vec!["engine stub".into()];
            }
            v
        })
        .collect()
}

fn verdict_reason(v: &Verdict) -> String {
    v.reasons.first().cloned().unwrap_or_default()
}

pub fn cmd_check(input: &Input, s: &Settings) -> Result<Report, CliError> {
    let t0 = Instant::now();
    let p = input.operator()?;
    let lambdas = input.check_lambdas(s);
    let opts = input.verdict_options(s);
    let verdicts = engine_verdicts(p, &lambdas, &opts, s.stub_engine);
    let mut text = String::new();
    let mut csv = csv_row(&["lambda_re", "lambda_im", "result", "status", "reason"].map(String::from));
    let _ = writeln!(text, "{:<14} {:<14} {:<32} reason", "lambda", "result", "status");
    for v in &verdicts {
        let _ = writeln!(
            text,
            "{:<14} {:<14} {:<32} {}",
            complex(v.query.lambda),
            v.result.to_string(),
            v.status.to_string(),
            verdict_reason(v)
        );
        csv.push_str(&csv_row(&[
            num(v.query.lambda[0]),
            num(v.query.lambda[1]),
            v.result.to_string(),
            v.status.to_string(),
            verdict_reason(v),
        ]));
    }
    let flips = flips(&verdicts);
    for f in &flips {
        let _ = writeln!(text, "flip: {} at lambda = {} -> {} at lambda = {}", f.0, num(f.1), f.2, num(f.3));
    }
    if let Some(v) = verdicts.first() {
        for n in &v.notes {
            let _ = writeln!(text, "note: {n}");
        }
    }
    let indeterminate = verdicts.iter().any(|v| v.result == VerdictResult::Indeterminate);
    let payload = json!({
        "verdicts": verdicts,
        "flips": flips.iter().map(|f| json!({"from": f.0, "at": f.1, "to": f.2, "next": f.3})).collect::<Vec<_>>(),
        "resolution": {"grid_1d": opts.spectral.grid_1d, "grid_2d": opts.spectral.grid_2d, "modes": opts.spectral.modes},
    });
    let mut r = finish("check", input, payload, text, csv, t0);
    r.indeterminate = indeterminate;
    Ok(r)
}

/// Consecutive real lambdas whose verdicts differ.
pub fn flips(verdicts: &[Verdict]) -> Vec<(VerdictResult, f64, VerdictResult, f64)> {
    verdicts
        .windows(2)
        .filter(|w| w[0].query.lambda[1] == 0.0 && w[1].query.lambda[1] == 0.0 && w[0].result != w[1].result)
        .map(|w| (w[0].result, w[0].query.lambda[0], w[1].result, w[1].query.lambda[0]))
        .collect()
}

pub fn spectrum_text(s: &SpectrumApprox) -> String {
    let mut text = String::new();
    let _ = writeln!(text, "window [{}, {}], status {}", num(s.window[0]), num(s.window[1]), s.status);
    if s.items.is_empty() {
        let _ = writeln!(text, "  (empty)");
    }
    for it in &s.items {
        let lo = if it.extends_below { format!("<={}", num(it.lo)) } else { num(it.lo) };
        let hi = if it.extends_above { format!("{}+", num(it.hi)) } else { num(it.hi) };
        let what = match it.kind {
            ItemKind::Interval => format!("interval [{lo}, {hi}]"),
            ItemKind::Point => format!("point {}", num(it.lo)),
            ItemKind::Complex => format!("complex {} points", it.points.len()),
        };
        let _ = writeln!(text, "  {what:<40} {:<32} sources: {}", it.status.to_string(), it.sources.join(", "));
    }
    for n in &s.notes {
        let _ = writeln!(text, "note: {n}");
    }
    text
}

pub fn spectrum_csv(s: &SpectrumApprox) -> String {
    let mut csv =
        csv_row(&["kind", "lo", "hi", "tol", "status", "extends_below", "extends_above", "sources"].map(String::from));
    for it in &s.items {
        csv.push_str(&csv_row(&[
            format!("{:?}", it.kind).to_lowercase(),
            num(it.lo),
            num(it.hi),
            num(it.tol),
            it.status.to_string(),
            it.extends_below.to_string(),
            it.extends_above.to_string(),
            it.sources.join(";"),
        ]));
    }
    csv
}

pub fn cmd_essspec(input: &Input, s: &Settings) -> Result<Report, CliError> {
    let t0 = Instant::now();
    let p = input.operator()?;
    let window = input.window(s);
    let res = input.spectral_resolution(s);
    let allow = input.allow_unjustified(s);
    let spec = match essential_spectrum(p, window, &res, allow) {
        Ok(sp) => sp,
        Err(e) => {
            let text = format!("essential spectrum not computed: {e}\n");
            let payload = json!({"window": [window.0, window.1], "error": e.to_string()});
            let mut r = finish(
                "essspec",
                input,
                payload,
                text,
                String::from("kind,lo,hi,tol,status,extends_below,extends_above,sources\n"),
                t0,
            );
            r.indeterminate = true;
            return Ok(r);
        }
    };
    let text = spectrum_text(&spec);
    let csv = spectrum_csv(&spec);
    let payload =
        json!({"spectrum": spec, "resolution": {"grid_1d": res.grid_1d, "grid_2d": res.grid_2d, "modes": res.modes}});
    Ok(finish("essspec", input, payload, text, csv, t0))
}
