//! Parzen-window densities and the good/bad suggestion rule.
//!
//! Continuous and integer parameters get a mixture of truncated normal
//! kernels, one per observation plus one wide prior kernel; categorical
//! parameters get Laplace-smoothed counts. Candidates are drawn from the
//! good-set density l and ranked by the ratio l(x)/g(x).

use super::{Assignment, HpoError, ParamKind, ParamSpec, ParamValue, SearchSpace, Trial, TrialStatus};
use crate::rng::Rng;

/// Tuning knobs of the suggestion rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpeKnobs {
    /// Trials drawn from the prior before density modeling starts.
    pub n_startup: usize,
    /// Fraction of observed trials forming the good set (top by objective).
    pub gamma: f64,
    /// Candidates drawn from l per suggestion.
    pub n_candidates: usize,
}

impl Default for TpeKnobs {
    fn default() -> TpeKnobs {
        TpeKnobs {
            n_startup: 10,
            gamma: 0.25,
            n_candidates: 24,
        }
    }
}

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(u: f64) -> f64 {
    0.5 * (1.0 + libm::erf(u / std::f64::consts::SQRT_2))
}

/// Mixture of truncated normal kernels over `[lo, hi]` (possibly in log
/// space). Observation kernels and the single prior kernel all carry weight
/// `1/(n+1)`, so the prior's share matches the contract exactly.
#[derive(Debug, Clone)]
pub struct ParzenDensity {
    lo: f64,
    hi: f64,
    log_space: bool,
    /// Kernel centers and bandwidths in the (possibly log) working space.
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl ParzenDensity {
    /// Builds the density from raw observations. With no observations the
    /// mixture degenerates to the prior kernel alone, so an empty bad set
    /// never produces a zero density.
    pub fn new(observations: &[f64], lo: f64, hi: f64, log_space: bool) -> ParzenDensity {
        let (tlo, thi) = if log_space { (lo.ln(), hi.ln()) } else { (lo, hi) };
        let range = thi - tlo;
        let mut centers: Vec<f64> = observations
            .iter()
            .map(|&x| if log_space { x.ln() } else { x })
            .map(|z| z.clamp(tlo, thi))
            .collect();
        centers.sort_by(|a, b| a.partial_cmp(b).expect("finite observations"));

        let n = centers.len();
        let floor = range / 100.0f64.min(n.max(1) as f64);
        let mut widths = Vec::with_capacity(n + 1);
        for (i, &z) in centers.iter().enumerate() {
            let left = if i == 0 { z - tlo } else { z - centers[i - 1] };
            let right = if i + 1 == n { thi - z } else { centers[i + 1] - z };
            widths.push(left.max(right).max(floor));
        }
        // Prior kernel: centered mid-range, one full range wide.
        centers.push((tlo + thi) / 2.0);
        widths.push(range);
        ParzenDensity {
            lo: tlo,
            hi: thi,
            log_space,
            centers,
            widths,
        }
    }

    fn kernel_pdf(&self, idx: usize, z: f64) -> f64 {
        let mu = self.centers[idx];
        let sigma = self.widths[idx];
        let mass = normal_cdf((self.hi - mu) / sigma) - normal_cdf((self.lo - mu) / sigma);
        normal_pdf((z - mu) / sigma) / (sigma * mass)
    }

    /// Density at `x` (in the original, non-log space).
    pub fn pdf(&self, x: f64) -> f64 {
        let z = if self.log_space { x.ln() } else { x };
        if z < self.lo || z > self.hi {
            return 0.0;
        }
        let w = 1.0 / self.centers.len() as f64;
        (0..self.centers.len()).map(|i| w * self.kernel_pdf(i, z)).sum()
    }

    /// Draws from the mixture by picking a kernel uniformly and rejection
    /// sampling its truncated normal. Returns a value in the original space.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let idx = rng.range_usize(self.centers.len());
        let mu = self.centers[idx];
        let sigma = self.widths[idx];
        let z = loop {
            let draw = rng.normal(mu, sigma);
            if (self.lo..=self.hi).contains(&draw) {
                break draw;
            }
        };
        if self.log_space {
            z.exp()
        } else {
            z
        }
    }
}

/// Laplace-smoothed categorical distribution over a fixed choice list.
#[derive(Debug, Clone)]
pub struct CategoricalDensity {
    probs: Vec<f64>,
}

impl CategoricalDensity {
    pub fn new(choices: &[ParamValue], observations: &[ParamValue]) -> CategoricalDensity {
        let k = choices.len();
        let mut counts = vec![1.0f64; k]; // Laplace smoothing
        for obs in observations {
            if let Some(i) = choices.iter().position(|c| c == obs) {
                counts[i] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        CategoricalDensity {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub fn prob(&self, choice_index: usize) -> f64 {
        self.probs[choice_index]
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.f64();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Finished trials with a finite objective, newest ordering preserved.
fn observed(history: &[Trial]) -> Vec<&Trial> {
    history
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .filter(|t| t.objective.map(f64::is_finite).unwrap_or(false))
        .collect()
}

/// Splits finished trials into (good, bad) by objective: the top
/// `ceil(gamma * n)` are good. Ties break toward the earlier trial id, so
/// the split is deterministic and invariant to constant objective shifts.
pub fn split_good_bad(history: &[Trial], gamma: f64) -> (Vec<&Trial>, Vec<&Trial>) {
    let mut obs = observed(history);
    obs.sort_by(|a, b| {
        let oa = a.objective.expect("observed trials have objectives");
        let ob = b.objective.expect("observed trials have objectives");
        ob.partial_cmp(&oa)
            .expect("finite objectives")
            .then(a.id.cmp(&b.id))
    });
    let n_good = ((gamma * obs.len() as f64).ceil() as usize).min(obs.len());
    let bad = obs.split_off(n_good);
    (obs, bad)
}

fn numeric_observations(trials: &[&Trial], name: &str) -> Vec<f64> {
    trials
        .iter()
        .filter_map(|t| t.assignment.get(name))
        .filter_map(|v| v.as_f64())
        .collect()
}

fn categorical_observations(trials: &[&Trial], name: &str) -> Vec<ParamValue> {
    trials
        .iter()
        .filter_map(|t| t.assignment.get(name))
        .cloned()
        .collect()
}

fn round_to_grid(x: f64, lo: i64, hi: i64, step: i64) -> i64 {
    let ticks = ((x - lo as f64) / step as f64).round() as i64;
    let max_tick = (hi - lo) / step;
    lo + ticks.clamp(0, max_tick) * step
}

enum ParamModel {
    Numeric {
        good: ParzenDensity,
        bad: ParzenDensity,
        quantize: Option<(i64, i64, i64)>,
    },
    Categorical {
        choices: Vec<ParamValue>,
        good: CategoricalDensity,
        bad: CategoricalDensity,
    },
}

impl ParamModel {
    fn build(spec: &ParamSpec, good: &[&Trial], bad: &[&Trial]) -> ParamModel {
        match &spec.kind {
            ParamKind::Uniform { lo, hi } => ParamModel::Numeric {
                good: ParzenDensity::new(&numeric_observations(good, &spec.name), *lo, *hi, false),
                bad: ParzenDensity::new(&numeric_observations(bad, &spec.name), *lo, *hi, false),
                quantize: None,
            },
            ParamKind::Loguniform { lo, hi } => ParamModel::Numeric {
                good: ParzenDensity::new(&numeric_observations(good, &spec.name), *lo, *hi, true),
                bad: ParzenDensity::new(&numeric_observations(bad, &spec.name), *lo, *hi, true),
                quantize: None,
            },
            ParamKind::QuantizedInt { lo, hi, step } => ParamModel::Numeric {
                good: ParzenDensity::new(
                    &numeric_observations(good, &spec.name),
                    *lo as f64,
                    *hi as f64,
                    false,
                ),
                bad: ParzenDensity::new(
                    &numeric_observations(bad, &spec.name),
                    *lo as f64,
                    *hi as f64,
                    false,
                ),
                quantize: Some((*lo, *hi, *step)),
            },
            ParamKind::Categorical { choices } => ParamModel::Categorical {
                choices: choices.clone(),
                good: CategoricalDensity::new(choices, &categorical_observations(good, &spec.name)),
                bad: CategoricalDensity::new(choices, &categorical_observations(bad, &spec.name)),
            },
        }
    }

    /// Draws one value from the good-set density.
    fn sample(&self, rng: &mut Rng) -> ParamValue {
        match self {
            ParamModel::Numeric { good, quantize, .. } => {
                let x = good.sample(rng);
                match quantize {
                    Some((lo, hi, step)) => ParamValue::Int(round_to_grid(x, *lo, *hi, *step)),
                    None => ParamValue::Float(x),
                }
            }
            ParamModel::Categorical { choices, good, .. } => choices[good.sample(rng)].clone(),
        }
    }

    /// `ln l(x) − ln g(x)` for one parameter value.
    fn log_ratio(&self, value: &ParamValue) -> f64 {
        match self {
            ParamModel::Numeric { good, bad, .. } => {
                let x = value.as_f64().expect("numeric parameter");
                good.pdf(x).ln() - bad.pdf(x).ln()
            }
            ParamModel::Categorical { choices, good, bad } => {
                let i = choices
                    .iter()
                    .position(|c| c == value)
                    .expect("sampled from the choice list");
                good.prob(i).ln() - bad.prob(i).ln()
            }
        }
    }
}

/// A suggestion together with every scored candidate, for auditing.
#[derive(Debug, Clone)]
pub struct TpeSuggestion {
    pub chosen: Assignment,
    /// `(candidate, ln l(x) − ln g(x))`, in draw order.
    pub candidates: Vec<(Assignment, f64)>,
}

/// Proposes the next assignment: prior sampling until `n_startup` finished
/// trials exist, then the candidate maximizing l/g among `n_candidates`
/// draws from the good-set density.
pub fn tpe_suggest(
    space: &SearchSpace,
    history: &[Trial],
    knobs: &TpeKnobs,
    rng: &mut Rng,
) -> Result<Assignment, HpoError> {
    Ok(tpe_suggest_detailed(space, history, knobs, rng)?.chosen)
}

/// [`tpe_suggest`] with the full candidate score table exposed.
pub fn tpe_suggest_detailed(
    space: &SearchSpace,
    history: &[Trial],
    knobs: &TpeKnobs,
    rng: &mut Rng,
) -> Result<TpeSuggestion, HpoError> {
    space.validate()?;
    let finished = observed(history).len();
    if finished < knobs.n_startup {
        let chosen = super::sample_prior(space, rng);
        space.check_assignment(&chosen)?;
        return Ok(TpeSuggestion {
            chosen,
            candidates: Vec::new(),
        });
    }

    let (good, bad) = split_good_bad(history, knobs.gamma);
    let models: Vec<ParamModel> = space
        .params
        .iter()
        .map(|spec| ParamModel::build(spec, &good, &bad))
        .collect();

    let n_candidates = knobs.n_candidates.max(1);
    let mut candidates = Vec::with_capacity(n_candidates);
    for _ in 0..n_candidates {
        let mut assignment = Assignment::new();
        let mut score = 0.0;
        for (spec, model) in space.params.iter().zip(&models) {
            let value = model.sample(rng);
            score += model.log_ratio(&value);
            assignment.insert(spec.name.clone(), value);
        }
        candidates.push((assignment, score));
    }
    let best = candidates
        .iter()
        .enumerate()
        .max_by(|(ia, (_, sa)), (ib, (_, sb))| {
            sa.partial_cmp(sb)
                .expect("finite scores")
                .then(ib.cmp(ia)) // ties keep the earliest draw
        })
        .map(|(i, _)| i)
        .expect("n_candidates >= 1");
    let chosen = candidates[best].0.clone();
    space.check_assignment(&chosen)?;
    Ok(TpeSuggestion { chosen, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hpo::{ParamKind, ParamSpec, SearchSpace};

    fn one_d_space() -> SearchSpace {
        SearchSpace {
            name: "test".into(),
            params: vec![ParamSpec {
                name: "x".into(),
                kind: ParamKind::Uniform { lo: 0.0, hi: 1.0 },
            }],
        }
    }

    fn trial(id: usize, x: f64, objective: f64) -> Trial {
        let mut assignment = Assignment::new();
        assignment.insert("x".into(), ParamValue::Float(x));
        Trial {
            id,
            seed: id as u64,
            assignment,
            objective: Some(objective),
            ood_acc: None,
            trace_ref: None,
            status: TrialStatus::Ok,
            error: None,
        }
    }

    #[test]
    fn split_matches_sort_oracle_on_quadratic() {
        let mut rng = Rng::from_seed(1);
        let trials: Vec<Trial> = (0..40)
            .map(|i| {
                let x = rng.f64();
                trial(i, x, -(x - 0.3) * (x - 0.3))
            })
            .collect();
        let (good, bad) = split_good_bad(&trials, 0.25);
        assert_eq!(good.len(), 10);
        assert_eq!(bad.len(), 30);

        // Oracle: sort objectives descending, take the top 10 ids.
        let mut by_objective: Vec<(f64, usize)> =
            trials.iter().map(|t| (t.objective.unwrap(), t.id)).collect();
        by_objective.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let oracle: std::collections::BTreeSet<usize> =
            by_objective[..10].iter().map(|&(_, id)| id).collect();
        let got: std::collections::BTreeSet<usize> = good.iter().map(|t| t.id).collect();
        assert_eq!(got, oracle);
        let worst_good = good.iter().map(|t| t.objective.unwrap()).fold(f64::INFINITY, f64::min);
        let best_bad = bad.iter().map(|t| t.objective.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        assert!(worst_good >= best_bad);
    }

    #[test]
    fn chosen_candidate_maximizes_rescored_ratio() {
        // Hand-built good/bad sets of 3 trials each; re-score every candidate
        // with independently constructed densities.
        let good_x = [0.28, 0.3, 0.33];
        let bad_x = [0.7, 0.8, 0.95];
        let mut trials = Vec::new();
        for (i, &x) in good_x.iter().enumerate() {
            trials.push(trial(i, x, 1.0));
        }
        for (i, &x) in bad_x.iter().enumerate() {
            trials.push(trial(3 + i, x, 0.0));
        }
        let knobs = TpeKnobs { n_startup: 2, gamma: 0.5, n_candidates: 16 };
        let space = one_d_space();
        let mut rng = Rng::from_seed(7);
        let suggestion = tpe_suggest_detailed(&space, &trials, &knobs, &mut rng).unwrap();
        assert_eq!(suggestion.candidates.len(), 16);

        let l = ParzenDensity::new(&good_x, 0.0, 1.0, false);
        let g = ParzenDensity::new(&bad_x, 0.0, 1.0, false);
        let rescored: Vec<f64> = suggestion
            .candidates
            .iter()
            .map(|(a, _)| {
                let x = a["x"].as_f64().unwrap();
                l.pdf(x).ln() - g.pdf(x).ln()
            })
            .collect();
        for ((_, score), expect) in suggestion.candidates.iter().zip(&rescored) {
            assert!((score - expect).abs() < 1e-12);
        }
        let max = rescored.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let chosen_x = suggestion.chosen["x"].as_f64().unwrap();
        let chosen_score = l.pdf(chosen_x).ln() - g.pdf(chosen_x).ln();
        assert!((chosen_score - max).abs() < 1e-12);
    }

    #[test]
    fn empty_bad_set_falls_back_to_prior_kernel() {
        // gamma * n rounds every observation into the good set; the bad
        // density must degenerate to the prior kernel, not divide by zero.
        let trials = vec![trial(0, 0.4, 1.0), trial(1, 0.6, 0.9)];
        let knobs = TpeKnobs { n_startup: 2, gamma: 0.99, n_candidates: 8 };
        let space = one_d_space();
        let mut rng = Rng::from_seed(3);
        let suggestion = tpe_suggest_detailed(&space, &trials, &knobs, &mut rng).unwrap();
        let x = suggestion.chosen["x"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
        for (_, score) in &suggestion.candidates {
            assert!(score.is_finite());
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let d = ParzenDensity::new(&[0.2, 0.5, 0.9], 0.0, 1.0, false);
        let n = 20_000;
        let sum: f64 = (0..n)
            .map(|i| d.pdf((i as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((sum - 1.0).abs() < 1e-3, "integral {}", sum);
    }

    #[test]
    fn log_space_density_integrates_to_one() {
        let d = ParzenDensity::new(&[1e-5, 3e-5], 1e-6, 1e-4, true);
        // pdf is a density over z = ln x, so it integrates to 1 over dz.
        let (zlo, zhi) = ((1e-6f64).ln(), (1e-4f64).ln());
        let n = 20_000;
        let mut sum = 0.0;
        for i in 0..n {
            let z = zlo + (zhi - zlo) * (i as f64 + 0.5) / n as f64;
            sum += d.pdf(z.exp());
        }
        sum *= (zhi - zlo) / n as f64;
        assert!((sum - 1.0).abs() < 1e-3, "integral {}", sum);
    }

    #[test]
    fn categorical_density_smooths_and_normalizes() {
        let choices = vec![
            ParamValue::Text("adam".into()),
            ParamValue::Text("adamw".into()),
            ParamValue::Text("sgd".into()),
        ];
        let seen = vec![ParamValue::Text("adam".into()), ParamValue::Text("adam".into())];
        let d = CategoricalDensity::new(&choices, &seen);
        let total: f64 = (0..3).map(|i| d.prob(i)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(d.prob(0) > d.prob(1));
        assert!(d.prob(2) > 0.0, "unseen choices keep probability mass");
    }

    #[test]
    fn quantized_rounding_stays_on_grid() {
        assert_eq!(round_to_grid(7.4, 2, 16, 2), 8);
        assert_eq!(round_to_grid(1.0, 2, 16, 2), 2);
        assert_eq!(round_to_grid(99.0, 2, 16, 2), 16);
        assert_eq!(round_to_grid(4.9, 2, 50, 1), 5);
    }

    #[test]
    fn constant_objective_shift_preserves_suggestion() {
        let mut rng = Rng::from_seed(5);
        let base: Vec<Trial> = (0..20)
            .map(|i| {
                let x = rng.f64();
                trial(i, x, -(x - 0.3) * (x - 0.3))
            })
            .collect();
        let shifted: Vec<Trial> = base
            .iter()
            .map(|t| Trial {
                objective: t.objective.map(|o| o + 123.456),
                ..t.clone()
            })
            .collect();
        let knobs = TpeKnobs::default();
        let space = one_d_space();
        let a = tpe_suggest(&space, &base, &knobs, &mut Rng::from_seed(9)).unwrap();
        let b = tpe_suggest(&space, &shifted, &knobs, &mut Rng::from_seed(9)).unwrap();
        assert_eq!(a, b);
    }
}
