//! Problem-description files: a minimal sectioned key-value format.
//!
//! One `[kind name]` header opens a section, `key = value` lines fill it,
//! `#` starts a comment, and there is no nesting. Section kinds are
//! `system`, `integral`, `linear`, `secondorder`, plus the unnamed
//! `tolerances` and `box`. Every diagnostic carries the 1-based line it
//! points at, because these files are written by hand.

use quadratura::expr::{parse_expr, ExprRef};
use quadratura::ToleranceConfig;
use std::fmt;

/// A parse diagnostic tied to a line of the problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ProblemError {}

fn fail<T>(line: usize, message: impl Into<String>) -> Result<T, ProblemError> {
    Err(ProblemError {
        line,
        message: message.into(),
    })
}

/// `[system name]`: a hierarchical quadrature system.
#[derive(Debug, Clone)]
pub struct SystemSection {
    pub name: String,
    /// Line of the section header, for diagnostics raised after parsing.
    pub line: usize,
    pub x0: f64,
    pub interval: (f64, f64),
    pub integrands: Vec<ExprRef>,
    pub breakpoints: Vec<f64>,
}

/// `[integral name]`: an integral family over a named system.
#[derive(Debug, Clone)]
pub struct IntegralSection {
    pub name: String,
    pub line: usize,
    pub system: String,
    /// Line of the `system = ...` key, so unresolved references point there.
    pub system_line: usize,
    pub outer: ExprRef,
    pub theta: ExprRef,
}

/// `[linear name]`: the scalar problem z' + p z = q with initial value z0.
#[derive(Debug, Clone)]
pub struct LinearSection {
    pub name: String,
    pub line: usize,
    pub p: ExprRef,
    pub q: ExprRef,
    pub x0: f64,
    pub interval: (f64, f64),
    pub z0: f64,
}

/// `[secondorder name]`: the oscillator u'' + q(x) u = 0 with initial data
/// (u0, du0), default (0, 1).
#[derive(Debug, Clone)]
pub struct SecondOrderSection {
    pub name: String,
    pub line: usize,
    pub coefficient: ExprRef,
    pub x0: f64,
    pub interval: (f64, f64),
    pub u0: f64,
    pub du0: f64,
    pub breakpoints: Vec<f64>,
}

/// `[tolerances]`: partial overrides of the default tolerance bundle.
#[derive(Debug, Clone, Default)]
pub struct ToleranceOverrides {
    pub ode_tol: Option<f64>,
    pub diff_step_scale: Option<f64>,
    pub constancy_tol: Option<f64>,
    pub rank_threshold: Option<f64>,
    pub equiv_tol: Option<f64>,
    pub sample_count: Option<usize>,
}

impl ToleranceOverrides {
    pub fn apply(&self, mut base: ToleranceConfig) -> ToleranceConfig {
        if let Some(v) = self.ode_tol {
            base.ode_tol = v;
        }
        if let Some(v) = self.diff_step_scale {
            base.diff_step_scale = v;
        }
        if let Some(v) = self.constancy_tol {
            base.constancy_tol = v;
        }
        if let Some(v) = self.rank_threshold {
            base.rank_threshold = v;
        }
        if let Some(v) = self.equiv_tol {
            base.equiv_tol = v;
        }
        if let Some(v) = self.sample_count {
            base.sample_count = v;
        }
        base
    }
}

/// Everything a problem file declares, in declaration order.
#[derive(Debug, Default)]
pub struct ProblemFile {
    pub systems: Vec<SystemSection>,
    pub integrals: Vec<IntegralSection>,
    pub linears: Vec<LinearSection>,
    pub secondorders: Vec<SecondOrderSection>,
    pub tolerances: Option<ToleranceOverrides>,
    pub box_ranges: Option<Vec<(f64, f64)>>,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<ProblemFile, ProblemError> {
        let mut out = ProblemFile::default();
        let mut current: Option<Builder> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return fail(line_no, "section header does not close its bracket");
                }
                if let Some(done) = current.take() {
                    done.finish(&mut out)?;
                }
                current = Some(Builder::open(&line[1..line.len() - 1], line_no, &out)?);
            } else {
                let Some(builder) = current.as_mut() else {
                    return fail(line_no, "key line appears before any section header");
                };
                let Some((key, value)) = line.split_once('=') else {
                    return fail(line_no, "expected `key = value`");
                };
                builder.set(key.trim(), value.trim(), line_no)?;
            }
        }
        if let Some(done) = current.take() {
            done.finish(&mut out)?;
        }
        Ok(out)
    }

    pub fn system(&self, name: &str) -> Option<&SystemSection> {
        self.systems.iter().find(|s| s.name == name)
    }

    pub fn integral(&self, name: &str) -> Option<&IntegralSection> {
        self.integrals.iter().find(|s| s.name == name)
    }

    pub fn linear(&self, name: &str) -> Option<&LinearSection> {
        self.linears.iter().find(|s| s.name == name)
    }

    pub fn secondorder(&self, name: &str) -> Option<&SecondOrderSection> {
        self.secondorders.iter().find(|s| s.name == name)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_float(value: &str, key: &str, line: usize) -> Result<f64, ProblemError> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => fail(line, format!("`{key}` wants a finite number, got `{value}`")),
    }
}

fn parse_pair(value: &str, key: &str, line: usize) -> Result<(f64, f64), ProblemError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 2 {
        return fail(
            line,
            format!("`{key}` wants two numbers separated by whitespace, got `{value}`"),
        );
    }
    Ok((
        parse_float(parts[0], key, line)?,
        parse_float(parts[1], key, line)?,
    ))
}

fn parse_count(value: &str, key: &str, line: usize) -> Result<usize, ProblemError> {
    value
        .parse::<usize>()
        .or_else(|_| fail(line, format!("`{key}` wants a whole number, got `{value}`")))
}

fn parse_dsl(value: &str, key: &str, line: usize) -> Result<ExprRef, ProblemError> {
    parse_expr(value).or_else(|e| fail(line, format!("in expression for `{key}`: {e}")))
}

fn put<T>(slot: &mut Option<T>, v: T, key: &str, line: usize) -> Result<(), ProblemError> {
    if slot.is_some() {
        return fail(line, format!("duplicate key `{key}` in this section"));
    }
    *slot = Some(v);
    Ok(())
}

fn require<T>(slot: Option<T>, key: &str, header: &str, line: usize) -> Result<T, ProblemError> {
    match slot {
        Some(v) => Ok(v),
        None => fail(line, format!("[{header}] is missing `{key}`")),
    }
}

enum Builder {
    System {
        name: String,
        line: usize,
        x0: Option<f64>,
        interval: Option<(f64, f64)>,
        integrands: Vec<ExprRef>,
        breakpoints: Vec<f64>,
    },
    Integral {
        name: String,
        line: usize,
        system: Option<(String, usize)>,
        outer: Option<ExprRef>,
        theta: Option<ExprRef>,
    },
    Linear {
        name: String,
        line: usize,
        p: Option<ExprRef>,
        q: Option<ExprRef>,
        x0: Option<f64>,
        interval: Option<(f64, f64)>,
        z0: Option<f64>,
    },
    SecondOrder {
        name: String,
        line: usize,
        coefficient: Option<ExprRef>,
        x0: Option<f64>,
        interval: Option<(f64, f64)>,
        u0: Option<f64>,
        du0: Option<f64>,
        breakpoints: Vec<f64>,
    },
    Tolerances {
        overrides: ToleranceOverrides,
    },
    BoxSection {
        line: usize,
        ranges: Vec<(f64, f64)>,
    },
}

impl Builder {
    fn open(header: &str, line: usize, seen: &ProblemFile) -> Result<Builder, ProblemError> {
        let tokens: Vec<&str> = header.split_whitespace().collect();
        match tokens.as_slice() {
            ["tolerances"] => {
                if seen.tolerances.is_some() {
                    return fail(line, "a second [tolerances] section is not allowed");
                }
                Ok(Builder::Tolerances {
                    overrides: ToleranceOverrides::default(),
                })
            }
            ["box"] => {
                if seen.box_ranges.is_some() {
                    return fail(line, "a second [box] section is not allowed");
                }
                Ok(Builder::BoxSection {
                    line,
                    ranges: Vec::new(),
                })
            }
            [kind, name] => {
                let name = name.to_string();
                match *kind {
                    "system" => {
                        if seen.system(&name).is_some() {
                            return fail(line, format!("duplicate [system {name}] section"));
                        }
                        Ok(Builder::System {
                            name,
                            line,
                            x0: None,
                            interval: None,
                            integrands: Vec::new(),
                            breakpoints: Vec::new(),
                        })
                    }
                    "integral" => {
                        if seen.integral(&name).is_some() {
                            return fail(line, format!("duplicate [integral {name}] section"));
                        }
                        Ok(Builder::Integral {
                            name,
                            line,
                            system: None,
                            outer: None,
                            theta: None,
                        })
                    }
                    "linear" => {
                        if seen.linear(&name).is_some() {
                            return fail(line, format!("duplicate [linear {name}] section"));
                        }
                        Ok(Builder::Linear {
                            name,
                            line,
                            p: None,
                            q: None,
                            x0: None,
                            interval: None,
                            z0: None,
                        })
                    }
                    "secondorder" => {
                        if seen.secondorder(&name).is_some() {
                            return fail(line, format!("duplicate [secondorder {name}] section"));
                        }
                        Ok(Builder::SecondOrder {
                            name,
                            line,
                            coefficient: None,
                            x0: None,
                            interval: None,
                            u0: None,
                            du0: None,
                            breakpoints: Vec::new(),
                        })
                    }
                    other => fail(
                        line,
                        format!(
                            "unknown section kind `{other}` (expected system, integral, \
                             linear, secondorder, tolerances, or box)"
                        ),
                    ),
                }
            }
            _ => fail(
                line,
                "section header must be `[kind name]`, or `[tolerances]` / `[box]`",
            ),
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ProblemError> {
        if value.is_empty() {
            return fail(line, format!("`{key}` has an empty value"));
        }
        match self {
            Builder::System {
                x0,
                interval,
                integrands,
                breakpoints,
                ..
            } => match key {
                "x0" => put(x0, parse_float(value, key, line)?, key, line),
                "interval" => put(interval, parse_pair(value, key, line)?, key, line),
                "integrand" => {
                    integrands.push(parse_dsl(value, key, line)?);
                    Ok(())
                }
                "breakpoint" => {
                    breakpoints.push(parse_float(value, key, line)?);
                    Ok(())
                }
                _ => fail(line, format!("unknown key `{key}` in a [system] section")),
            },
            Builder::Integral {
                system,
                outer,
                theta,
                ..
            } => match key {
                "system" => put(system, (value.to_string(), line), key, line),
                "outer" => put(outer, parse_dsl(value, key, line)?, key, line),
                "theta" => put(theta, parse_dsl(value, key, line)?, key, line),
                _ => fail(line, format!("unknown key `{key}` in an [integral] section")),
            },
            Builder::Linear {
                p,
                q,
                x0,
                interval,
                z0,
                ..
            } => match key {
                "p" => put(p, parse_dsl(value, key, line)?, key, line),
                "q" => put(q, parse_dsl(value, key, line)?, key, line),
                "x0" => put(x0, parse_float(value, key, line)?, key, line),
                "interval" => put(interval, parse_pair(value, key, line)?, key, line),
                "z0" => put(z0, parse_float(value, key, line)?, key, line),
                _ => fail(line, format!("unknown key `{key}` in a [linear] section")),
            },
            Builder::SecondOrder {
                coefficient,
                x0,
                interval,
                u0,
                du0,
                breakpoints,
                ..
            } => match key {
                "q" => put(coefficient, parse_dsl(value, key, line)?, key, line),
                "x0" => put(x0, parse_float(value, key, line)?, key, line),
                "interval" => put(interval, parse_pair(value, key, line)?, key, line),
                "u0" => put(u0, parse_float(value, key, line)?, key, line),
                "du0" => put(du0, parse_float(value, key, line)?, key, line),
                "breakpoint" => {
                    breakpoints.push(parse_float(value, key, line)?);
                    Ok(())
                }
                _ => fail(
                    line,
                    format!("unknown key `{key}` in a [secondorder] section"),
                ),
            },
            Builder::Tolerances { overrides } => match key {
                "ode_tol" => put(&mut overrides.ode_tol, parse_float(value, key, line)?, key, line),
                "diff_step_scale" => put(
                    &mut overrides.diff_step_scale,
                    parse_float(value, key, line)?,
                    key,
                    line,
                ),
                "constancy_tol" => put(
                    &mut overrides.constancy_tol,
                    parse_float(value, key, line)?,
                    key,
                    line,
                ),
                "rank_threshold" => put(
                    &mut overrides.rank_threshold,
                    parse_float(value, key, line)?,
                    key,
                    line,
                ),
                "equiv_tol" => put(
                    &mut overrides.equiv_tol,
                    parse_float(value, key, line)?,
                    key,
                    line,
                ),
                "sample_count" => put(
                    &mut overrides.sample_count,
                    parse_count(value, key, line)?,
                    key,
                    line,
                ),
                _ => fail(line, format!("unknown key `{key}` in [tolerances]")),
            },
            Builder::BoxSection { ranges, .. } => match key {
                "range" => {
                    let (lo, hi) = parse_pair(value, key, line)?;
                    if lo >= hi {
                        return fail(line, format!("box range {lo} {hi} is empty"));
                    }
                    ranges.push((lo, hi));
                    Ok(())
                }
                _ => fail(line, format!("unknown key `{key}` in [box]")),
            },
        }
    }

    fn finish(self, out: &mut ProblemFile) -> Result<(), ProblemError> {
        match self {
            Builder::System {
                name,
                line,
                x0,
                interval,
                integrands,
                breakpoints,
            } => {
                let header = format!("system {name}");
                if integrands.is_empty() {
                    return fail(line, format!("[{header}] declares no `integrand` lines"));
                }
                out.systems.push(SystemSection {
                    x0: require(x0, "x0", &header, line)?,
                    interval: require(interval, "interval", &header, line)?,
                    name,
                    line,
                    integrands,
                    breakpoints,
                });
            }
            Builder::Integral {
                name,
                line,
                system,
                outer,
                theta,
            } => {
                let header = format!("integral {name}");
                let (system, system_line) = require(system, "system", &header, line)?;
                out.integrals.push(IntegralSection {
                    outer: require(outer, "outer", &header, line)?,
                    theta: require(theta, "theta", &header, line)?,
                    name,
                    line,
                    system,
                    system_line,
                });
            }
            Builder::Linear {
                name,
                line,
                p,
                q,
                x0,
                interval,
                z0,
            } => {
                let header = format!("linear {name}");
                out.linears.push(LinearSection {
                    p: require(p, "p", &header, line)?,
                    q: require(q, "q", &header, line)?,
                    x0: require(x0, "x0", &header, line)?,
                    interval: require(interval, "interval", &header, line)?,
                    z0: z0.unwrap_or(0.0),
                    name,
                    line,
                });
            }
            Builder::SecondOrder {
                name,
                line,
                coefficient,
                x0,
                interval,
                u0,
                du0,
                breakpoints,
            } => {
                let header = format!("secondorder {name}");
                out.secondorders.push(SecondOrderSection {
                    coefficient: require(coefficient, "q", &header, line)?,
                    x0: require(x0, "x0", &header, line)?,
                    interval: require(interval, "interval", &header, line)?,
                    u0: u0.unwrap_or(0.0),
                    du0: du0.unwrap_or(1.0),
                    name,
                    line,
                    breakpoints,
                });
            }
            Builder::Tolerances { overrides } => {
                out.tolerances = Some(overrides);
            }
            Builder::BoxSection { line, ranges } => {
                if ranges.is_empty() {
                    return fail(line, "[box] declares no `range` lines");
                }
                out.box_ranges = Some(ranges);
            }
        }
        Ok(())
    }
}
