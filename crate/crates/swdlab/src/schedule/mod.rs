//! Timestep/scale schedules: the paired lists that tell a few-step sampler
//! at which noise level and at which resolution every step runs.
//!
//! Text form: `t=<comma ints 0..1000>; s=<comma ints or TxHxW triples>`.
//! Integer timesteps divide by 1000 into tau; an integer scale `s` means a
//! single-frame `s x s` image.

use crate::spectral::{safe_scale, Spectrum};

/// One step's resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    pub t_frames: usize,
    pub h: usize,
    pub w: usize,
}

impl ScaleSpec {
    pub fn square(s: usize) -> ScaleSpec {
        ScaleSpec { t_frames: 1, h: s, w: s }
    }

    pub fn video(t: usize, h: usize, w: usize) -> ScaleSpec {
        ScaleSpec { t_frames: t, h, w }
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.t_frames, self.h, self.w)
    }

    fn render(&self) -> String {
        if self.t_frames == 1 && self.h == self.w {
            format!("{}", self.h)
        } else {
            format!("{}x{}x{}", self.t_frames, self.h, self.w)
        }
    }

    /// Component-wise <=.
    fn le(&self, other: &ScaleSpec) -> bool {
        self.t_frames <= other.t_frames && self.h <= other.h && self.w <= other.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    /// Strictly decreasing, starting at 1.0.
    pub taus: Vec<f64>,
    /// Component-wise non-decreasing, ending at the target resolution.
    pub scales: Vec<ScaleSpec>,
}

/// A named invariant violation, pointing at the offending index.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}: {}", self.index, self.rule)
    }
}

/// Parse failure with the byte offset of the problem.
#[derive(Clone, Debug, thiserror::Error)]
#[error("schedule parse error at byte {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

impl ScheduleSpec {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn target(&self) -> ScaleSpec {
        *self.scales.last().expect("schedule must be nonempty")
    }

    /// All-same-scale schedule at the given resolution (the full-resolution
    /// baseline path).
    pub fn constant(taus: &[f64], scale: ScaleSpec) -> ScheduleSpec {
        ScheduleSpec {
            taus: taus.to_vec(),
            scales: vec![scale; taus.len()],
        }
    }

    /// Every invariant, reported rather than thrown. An empty list means ok.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.taus.is_empty() {
            v.push(Violation {
                index: 0,
                rule: "schedule is empty".into(),
            });
            return v;
        }
        if self.taus.len() != self.scales.len() {
            v.push(Violation {
                index: 0,
                rule: format!(
                    "{} timesteps but {} scales",
                    self.taus.len(),
                    self.scales.len()
                ),
            });
            return v;
        }
        if (self.taus[0] - 1.0).abs() > 1e-12 {
            v.push(Violation {
                index: 0,
                rule: format!("sampling must start at tau = 1.0, got {}", self.taus[0]),
            });
        }
        for (i, &tau) in self.taus.iter().enumerate() {
            if !(tau > 0.0 && tau <= 1.0) {
                v.push(Violation {
                    index: i,
                    rule: format!("tau {tau} outside (0, 1]"),
                });
            }
            if i > 0 && tau >= self.taus[i - 1] {
                v.push(Violation {
                    index: i,
                    rule: format!("tau not strictly decreasing: {} then {tau}", self.taus[i - 1]),
                });
            }
        }
        for (i, s) in self.scales.iter().enumerate() {
            if s.t_frames == 0 || s.h == 0 || s.w == 0 {
                v.push(Violation {
                    index: i,
                    rule: "scale has a zero dimension".into(),
                });
            }
            if i > 0 && !self.scales[i - 1].le(s) {
                v.push(Violation {
                    index: i,
                    rule: format!(
                        "scale decreases: {} then {}",
                        self.scales[i - 1].render(),
                        s.render()
                    ),
                });
            }
        }
        v
    }

    /// Divisibility check against a network's patching, separate from the
    /// intrinsic invariants because a schedule may be validated before any
    /// model exists.
    pub fn check_patch_compat(&self, patch: usize, temporal_patch: usize) -> Vec<Violation> {
        let mut v = Vec::new();
        for (i, s) in self.scales.iter().enumerate() {
            if s.h % patch != 0 || s.w % patch != 0 {
                v.push(Violation {
                    index: i,
                    rule: format!("scale {} not divisible by patch {patch}", s.render()),
                });
            }
            if s.t_frames % temporal_patch != 0 {
                v.push(Violation {
                    index: i,
                    rule: format!(
                        "scale {} frames not divisible by temporal patch {temporal_patch}",
                        s.render()
                    ),
                });
            }
        }
        v
    }

    pub fn serialize(&self) -> String {
        let t: Vec<String> = self
            .taus
            .iter()
            .map(|&tau| format!("{}", (tau * 1000.0).round() as i64))
            .collect();
        let s: Vec<String> = self.scales.iter().map(|sc| sc.render()).collect();
        format!("t={}; s={}", t.join(","), s.join(","))
    }

    pub fn parse(text: &str) -> Result<ScheduleSpec, ParseError> {
        let err = |position: usize, message: &str| ParseError {
            position,
            message: message.to_string(),
        };
        let semi = text
            .find(';')
            .ok_or_else(|| err(text.len(), "missing ';' between t= and s= sections"))?;
        let (t_part, s_part) = (text[..semi].trim(), text[semi + 1..].trim());
        let t_body = t_part
            .strip_prefix("t=")
            .ok_or_else(|| err(0, "expected 't=' prefix"))?;
        let s_off = semi + 1 + (text[semi + 1..].len() - text[semi + 1..].trim_start().len());
        let s_body = s_part
            .strip_prefix("s=")
            .ok_or_else(|| err(s_off, "expected 's=' prefix"))?;

        let mut taus = Vec::new();
        let mut offset = text.find(t_body).unwrap_or(2);
        for tok in t_body.split(',') {
            let tok_trim = tok.trim();
            let t: i64 = tok_trim
                .parse()
                .map_err(|_| err(offset, &format!("bad timestep {tok_trim:?}")))?;
            if !(0..=1000).contains(&t) {
                return Err(err(offset, &format!("timestep {t} outside 0..1000")));
            }
            taus.push(t as f64 / 1000.0);
            offset += tok.len() + 1;
        }

        let mut scales = Vec::new();
        let mut offset = s_off + 2;
        for tok in s_body.split(',') {
            let tok_trim = tok.trim();
            let parts: Vec<&str> = tok_trim.split('x').collect();
            let parse_dim = |d: &str| -> Result<usize, ParseError> {
                d.parse()
                    .map_err(|_| err(offset, &format!("bad scale component {d:?}")))
            };
            let scale = match parts.as_slice() {
                [s] => ScaleSpec::square(parse_dim(s)?),
                [t, h, w] => ScaleSpec::video(parse_dim(t)?, parse_dim(h)?, parse_dim(w)?),
                _ => return Err(err(offset, &format!("scale {tok_trim:?} is neither INT nor TxHxW"))),
            };
            scales.push(scale);
            offset += tok.len() + 1;
        }

        if taus.len() != scales.len() {
            return Err(err(
                text.len(),
                &format!("{} timesteps but {} scales", taus.len(), scales.len()),
            ));
        }
        Ok(ScheduleSpec { taus, scales })
    }
}

/// Default few-step tau grid: linear from 1.0 down to `floor`. The floor
/// biases the grid toward noisier timesteps than a uniform 1..0 split,
/// which is where renoising hides upsampling artifacts.
pub fn default_tau_grid(n: usize, floor: f64) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 1.0 - (1.0 - floor) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Proposes an N-step schedule from a measured signal spectrum: each tau
/// gets the smallest resolution that keeps all unmasked frequencies, then
/// the scales are clamped non-decreasing and pinned to the target.
pub fn suggest(
    signal: &Spectrum,
    n: usize,
    target: ScaleSpec,
    rho: f64,
    tau_floor: f64,
) -> ScheduleSpec {
    assert!(n >= 2, "suggest needs at least two steps");
    assert_eq!(target.t_frames, 1, "suggest covers image schedules");
    let taus = default_tau_grid(n, tau_floor);
    let mut scales: Vec<ScaleSpec> = taus
        .iter()
        .map(|&tau| {
            let d = safe_scale(signal, tau, target.h, rho);
            ScaleSpec::square((target.h / d).max(1))
        })
        .collect();
    for i in 1..n {
        if !scales[i - 1].le(&scales[i]) {
            scales[i] = scales[i - 1];
        }
    }
    scales[n - 1] = target;
    // pinning the target may re-break monotonicity upstream; clamp down
    for i in (0..n - 1).rev() {
        if !scales[i].le(&scales[i + 1]) {
            scales[i] = scales[i + 1];
        }
    }
    ScheduleSpec { taus, scales }
}

#[cfg(test)]
mod tests;
