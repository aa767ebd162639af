//! Engine against oracle: verdicts vs conditioning trends, essential
//! spectrum vs persistent truncation spectra, and (with a seed) the
//! limit-operator homomorphism on random operator pairs.

use std::fmt::Write as _;
use std::time::Instant;

use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use fredholm_core::calculus::{DiffOp, Status};
use fredholm_core::limits::{limit_operator, BasePoint};
use fredholm_core::oracle::{conditioning_trend, ess_spectrum_oracle, OracleParams, Trend, TrendReport};
use fredholm_core::sampling::{class_fixtures, random_operator};
use fredholm_core::spectral::{essential_spectrum, ItemKind, SpectrumApprox, Verdict, VerdictResult};

use crate::report::{complex, csv_row, num};
use crate::{engine_verdicts, CliError, Input, Report, Settings};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum Agreement {
    Agree,
    Disagree,
    NotComparable(String),
}

impl Agreement {
    fn label(&self) -> &'static str {
        match self {
            Agreement::Agree => "agree",
            Agreement::Disagree => "DISAGREE",
            Agreement::NotComparable(_) => "not comparable",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub lambda: [f64; 2],
    pub engine: VerdictResult,
    pub engine_status: Status,
    pub oracle: Option<TrendReport>,
    pub oracle_error: Option<String>,
    pub agreement: Agreement,
}

/// Comparison rule for one lambda.
pub fn compare(v: &Verdict, oracle: Result<&TrendReport, &str>) -> Agreement {
    use Agreement::*;
    if v.result == VerdictResult::Indeterminate {
        return NotComparable("engine indeterminate".into());
    }
    if v.status == Status::Approximate {
        return NotComparable("engine result is approximate".into());
    }
    let t = match oracle {
        Ok(t) => t,
        Err(e) => return NotComparable(format!("oracle unavailable: {e}")),
    };
    if !t.hermitian {
        return NotComparable("non-self-adjoint truncation: indicative only".into());
    }
    match (v.result, t.trend) {
        (_, Trend::Unclear) => NotComparable("oracle trend unclear".into()),
        (VerdictResult::Fredholm, Trend::BoundedBelow) | (VerdictResult::NotFredholm, Trend::Decaying) => Agree,
        _ => Disagree,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumCheck {
    pub engine_bottom: Option<f64>,
    pub oracle_bottom: Option<f64>,
    pub tolerance: f64,
    pub agreement: Agreement,
}

fn lowest_interval(s: &SpectrumApprox) -> Option<(f64, Status, bool, f64)> {
    s.items
        .iter()
        .filter(|i| i.kind == ItemKind::Interval)
        .min_by(|a, b| a.lo.total_cmp(&b.lo))
        .map(|i| (i.lo, i.status, i.extends_below, i.tol))
}

/// Lowest interval of the engine spectrum against the lowest persistent
/// interval of the oracle, within `tol` or the oracle item's own
/// tolerance, whichever is larger.
pub fn compare_spectra(engine: &SpectrumApprox, oracle: &SpectrumApprox, tol: f64) -> SpectrumCheck {
    let e = lowest_interval(engine);
    let o = lowest_interval(oracle);
    let tol = o.map_or(tol, |x| tol.max(x.3));
    let indicative = oracle.notes.iter().any(|n| n.contains("indicative only"));
    let agreement = match (e, o) {
        _ if indicative => Agreement::NotComparable("non-self-adjoint truncation: indicative only".into()),
        (Some((_, Status::Approximate, _, _)), _) => Agreement::NotComparable("engine spectrum is approximate".into()),
        (Some((_, _, true, _)), _) | (_, Some((_, _, true, _))) => {
            Agreement::NotComparable("spectrum extends below the window".into())
        }
        (Some((a, ..)), Some((b, ..))) if (a - b).abs() <= tol => Agreement::Agree,
        (None, None) => Agreement::Agree,
        _ => Agreement::Disagree,
    };
    SpectrumCheck { engine_bottom: e.map(|x| x.0), oracle_bottom: o.map(|x| x.0), tolerance: tol, agreement }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub seed: u64,
    pub pairs: usize,
    pub strata: usize,
    pub failures: Vec<String>,
}

/// `limit(PQ) = limit(P) limit(Q)` and symbol multiplicativity on random
/// pairs over the file's geometry, when it has a coefficient pool.
pub fn homomorphism_check(space_id: &str, seed: u64, pairs: usize) -> Option<PropertyCheck> {
    let fx = class_fixtures().into_iter().find(|f| f.space.id == space_id)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let ops: Vec<(DiffOp, DiffOp)> = (0..pairs)
        .map(|_| (random_operator(&fx.frame, &fx.pool, &mut rng), random_operator(&fx.frame, &fx.pool, &mut rng)))
        .collect();
    let ids: Vec<String> = fx.space.boundary_strata().map(|s| s.id.clone()).collect();
    let failures: Vec<String> = ops
        .par_iter()
        .enumerate()
        .flat_map_iter(|(k, (p, q))| {
            let mut out = Vec::new();
            let pq = match p.compose(q) {
                Ok(x) => x,
                Err(e) => return vec![format!("pair {k}: {e}")],
            };
            let sym = p.principal_symbol().mul(&q.principal_symbol());
            if !sym.is_zero() && pq.principal_symbol() != sym {
                out.push(format!("pair {k}: principal symbol not multiplicative"));
            }
            for id in &ids {
                let lim = |x: &DiffOp| limit_operator(x, id, &BasePoint::Symbolic, true);
                match (lim(p), lim(q), lim(&pq)) {
                    (Ok(a), Ok(b), Ok(ab)) => match a.compose(&b) {
                        Ok(c) if c.op.normalized() == ab.op.normalized() => {}
                        _ => out.push(format!("pair {k} at {id}: limit of product differs")),
                    },
                    _ => out.push(format!("pair {k} at {id}: limit failed")),
                }
            }
            out
        })
        .collect();
    Some(PropertyCheck { seed, pairs, strata: ids.len(), failures })
}

pub fn cmd_validate(input: &Input, s: &Settings) -> Result<Report, CliError> {
    let t0 = Instant::now();
    let p = input.operator()?;
    let lambdas: Vec<Complex64> = input.lambdas(s);
    let opts = input.verdict_options(s);
    let verdicts = engine_verdicts(p, &lambdas, &opts, s.stub_engine);
    let params = OracleParams::for_operator(p);
    let trends: Vec<Result<TrendReport, String>> =
        lambdas.par_iter().map(|&l| conditioning_trend(p, l, &params).map_err(|e| e.to_string())).collect();
    let rows: Vec<Row> = verdicts
        .iter()
        .zip(&trends)
        .map(|(v, t)| Row {
            lambda: v.query.lambda,
            engine: v.result,
            engine_status: v.status,
            oracle: t.as_ref().ok().cloned(),
            oracle_error: t.as_ref().err().cloned(),
            agreement: compare(v, t.as_ref().map_err(|e| e.as_str())),
        })
        .collect();

    let window = input.window(s);
    let res = input.spectral_resolution(s);
    let (spectrum, spectrum_check) =
        match (essential_spectrum(p, window, &res, opts.allow_unjustified), ess_spectrum_oracle(p, window, &params)) {
            (Ok(e), Ok(o)) => {
                let check = compare_spectra(&e, &o, params.tol);
                (json!({"engine": e, "oracle": o}), check)
            }
            (e, o) => {
                let reason = match (e, o) {
                    (Err(x), _) => format!("engine: {x}"),
                    (_, Err(x)) => format!("oracle: {x}"),
                    _ => unreachable!(),
                };
                let check = SpectrumCheck {
                    engine_bottom: None,
                    oracle_bottom: None,
                    tolerance: params.tol,
                    agreement: Agreement::NotComparable(reason),
                };
                (json!({}), check)
            }
        };

    let props = s.seed.and_then(|seed| homomorphism_check(&input.file.space.id, seed, 100));

    // agreement matrix: engine result x oracle trend
    let engines = [VerdictResult::Fredholm, VerdictResult::NotFredholm, VerdictResult::Indeterminate];
    let oracle_cols = ["BoundedBelow", "Decaying", "Unclear", "unavailable"];
    let col = |r: &Row| match &r.oracle {
        Some(t) => t.trend.to_string(),
        None => "unavailable".to_string(),
    };
    let mut matrix = vec![vec![0usize; oracle_cols.len()]; engines.len()];
    for r in &rows {
        let i = engines.iter().position(|e| *e == r.engine).unwrap();
        let j = oracle_cols.iter().position(|c| *c == col(r)).unwrap();
        matrix[i][j] += 1;
    }
    let count = |f: &dyn Fn(&Agreement) -> bool| rows.iter().filter(|r| f(&r.agreement)).count();
    let agree = count(&|a| *a == Agreement::Agree);
    let mut disagree = count(&|a| *a == Agreement::Disagree);
    let not_comparable = count(&|a| matches!(a, Agreement::NotComparable(_)));
    if spectrum_check.agreement == Agreement::Disagree {
        disagree += 1;
    }
    if let Some(pc) = &props {
        disagree += pc.failures.len();
    }

    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<12} {:<14} {:<30} {:<14} {:<14} agreement",
        "lambda", "engine", "status", "oracle", "sigma_min"
    );
    let mut csv = csv_row(
        &["lambda_re", "lambda_im", "engine", "engine_status", "oracle_trend", "sigma_min_last", "agreement", "reason"]
            .map(String::from),
    );
    for r in &rows {
        let sigma = r.oracle.as_ref().and_then(|t| t.sigmas.last().copied());
        let reason = match &r.agreement {
            Agreement::NotComparable(why) => why.clone(),
            _ => String::new(),
        };
        let _ = writeln!(
            text,
            "{:<12} {:<14} {:<30} {:<14} {:<14} {} {}",
            complex(r.lambda),
            r.engine.to_string(),
            r.engine_status.to_string(),
            col(r),
            sigma.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into()),
            r.agreement.label(),
            if reason.is_empty() { String::new() } else { format!("({reason})") }
        );
        csv.push_str(&csv_row(&[
            num(r.lambda[0]),
            num(r.lambda[1]),
            r.engine.to_string(),
            r.engine_status.to_string(),
            col(r),
            sigma.map(|v| format!("{v:.6e}")).unwrap_or_default(),
            r.agreement.label().to_string(),
            reason,
        ]));
    }
    let _ = writeln!(text, "\nagreement matrix (rows: engine, columns: oracle)");
    let _ = writeln!(text, "{:<14} {}", "", oracle_cols.map(|c| format!("{c:>12}")).join(" "));
    for (i, e) in engines.iter().enumerate() {
        let cells: Vec<String> = matrix[i].iter().map(|c| format!("{c:>12}")).collect();
        let _ = writeln!(text, "{:<14} {}", e.to_string(), cells.join(" "));
    }
    let _ = writeln!(
        text,
        "\nspectrum bottom: engine {}, oracle {} (tolerance {}): {}",
        spectrum_check.engine_bottom.map(num).unwrap_or_else(|| "-".into()),
        spectrum_check.oracle_bottom.map(num).unwrap_or_else(|| "-".into()),
        num(spectrum_check.tolerance),
        match &spectrum_check.agreement {
            Agreement::NotComparable(w) => format!("not comparable ({w})"),
            a => a.label().to_string(),
        }
    );
    if let Some(pc) = &props {
        let _ = writeln!(
            text,
            "homomorphism check: seed {}, {} pairs over {} strata, {} failures",
            pc.seed,
            pc.pairs,
            pc.strata,
            pc.failures.len()
        );
        for f in &pc.failures {
            let _ = writeln!(text, "  {f}");
        }
    } else if s.seed.is_some() {
        let _ = writeln!(text, "homomorphism check: no coefficient pool for {}", input.file.space.id);
    }
    let _ = writeln!(text, "\n{agree} agree, {disagree} certified disagreements, {not_comparable} not comparable");

    let payload = json!({
        "rows": rows,
        "matrix": {
            "engine": engines.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            "oracle": oracle_cols,
            "counts": matrix,
        },
        "spectrum": spectrum,
        "spectrum_check": spectrum_check,
        "properties": props,
        "summary": {"agree": agree, "disagree": disagree, "not_comparable": not_comparable},
        "oracle_params": params,
    });
    let indeterminate = rows.iter().any(|r| r.engine == VerdictResult::Indeterminate);
    Ok(Report {
        command: "validate",
        input: input.echo(),
        payload,
        text,
        csv,
        indeterminate,
        disagreements: disagree,
        timing_ms: t0.elapsed().as_millis(),
    })
}
