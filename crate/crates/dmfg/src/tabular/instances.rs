//! The congestion instance family and the plain-text instance file format.
//!
//! Congestion games on a ring of `S` locations: action `a` tries to advance
//! `a` steps (action 0 stays). The reward pays the appeal of the location the
//! agent is heading to, decays with the crowd mass at the agent's own
//! location, and charges a small cost per step of movement. Crowded
//! destinations also make moves more likely to fail, which is the
//! transition's mean-field dependence.
//!
//! # Instance file grammar
//!
//! ```text
//! dmfg-instance v1
//! <S> <A> <beta> <R_max>
//! mu0 <S weights>
//! congestion
//! base <S values>
//! congestion_weight <v>
//! move_cost <v>
//! slip <v>
//! crowd_slip <v>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every other line is
//! as above, in order.

use super::{TabularError, TabularInstance};
use crate::prob::Distribution;

/// Parameters of a congestion-family instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionParams {
    pub state_count: usize,
    pub action_count: usize,
    pub discount: f64,
    pub r_max: f64,
    pub initial_mean_field: Vec<f64>,
    /// Appeal of each location, length `state_count`.
    pub base: Vec<f64>,
    /// Reward lost per unit of crowd mass at the agent's own location.
    pub congestion_weight: f64,
    /// Reward lost per step of attempted movement.
    pub move_cost: f64,
    /// Baseline probability that a move fails and the agent stays.
    pub slip: f64,
    /// Extra failure probability per unit of crowd mass at the destination.
    pub crowd_slip: f64,
}

impl CongestionParams {
    pub fn build(self) -> TabularInstance {
        assert_eq!(self.base.len(), self.state_count);
        assert_eq!(self.initial_mean_field.len(), self.state_count);
        let mu0 = Distribution::new(self.initial_mean_field.clone()).expect("valid mu0");
        let s_n = self.state_count;
        let r_max = self.r_max;
        let p = self.clone();
        let reward = move |s: usize, a: usize, mu: &Distribution| -> f64 {
            let target = (s + a) % s_n;
            let raw = p.base[target] - p.congestion_weight * mu.get(s) - p.move_cost * a as f64;
            raw.clamp(0.0, r_max)
        };
        let p2 = self.clone();
        let transition = move |s: usize, a: usize, mu: &Distribution| -> Distribution {
            let target = (s + a) % s_n;
            if target == s {
                return Distribution::delta(s_n, s);
            }
            let stay = (p2.slip + p2.crowd_slip * mu.get(target)).clamp(0.0, 1.0);
            let mut w = vec![0.0; s_n];
            w[s] = stay;
            w[target] = 1.0 - stay;
            Distribution::new(w).expect("valid transition row")
        };
        TabularInstance::new(
            self.state_count,
            self.action_count,
            Box::new(transition),
            Box::new(reward),
            self.discount,
            self.r_max,
            mu0,
        )
    }

    /// Renders this instance in the instance file format.
    pub fn to_file_string(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "dmfg-instance v1\n{} {} {:?} {:?}\nmu0 {}\ncongestion\nbase {}\ncongestion_weight {:?}\nmove_cost {:?}\nslip {:?}\ncrowd_slip {:?}\n",
            self.state_count,
            self.action_count,
            self.discount,
            self.r_max,
            join(&self.initial_mean_field),
            join(&self.base),
            self.congestion_weight,
            self.move_cost,
            self.slip,
            self.crowd_slip,
        )
    }
}

/// 4 locations, stay-or-advance. Used as the small regression instance.
pub fn congestion4_params() -> CongestionParams {
    CongestionParams {
        state_count: 4,
        action_count: 2,
        discount: 0.9,
        r_max: 1.0,
        initial_mean_field: vec![0.25; 4],
        base: vec![0.1, 0.35, 0.65, 1.0],
        congestion_weight: 0.3,
        move_cost: 0.05,
        slip: 0.1,
        crowd_slip: 0.1,
    }
}

pub fn congestion4() -> TabularInstance {
    congestion4_params().build()
}

/// 8 locations, four step sizes, milder congestion.
pub fn congestion8_params() -> CongestionParams {
    CongestionParams {
        state_count: 8,
        action_count: 4,
        discount: 0.85,
        r_max: 1.0,
        initial_mean_field: vec![0.125; 8],
        base: vec![0.55, 0.65, 0.75, 0.85, 1.0, 0.1, 0.25, 0.4],
        congestion_weight: 0.25,
        move_cost: 0.03,
        slip: 0.1,
        crowd_slip: 0.08,
    }
}

pub fn congestion8() -> TabularInstance {
    congestion8_params().build()
}

/// Mean-field independent chain: the fixed point must coincide with plain
/// value iteration on the underlying MDP.
pub fn chain6_params() -> CongestionParams {
    CongestionParams {
        state_count: 6,
        action_count: 3,
        discount: 0.8,
        r_max: 1.0,
        initial_mean_field: vec![1.0 / 6.0; 6],
        base: vec![0.15, 0.3, 0.5, 0.7, 1.0, 0.05],
        congestion_weight: 0.0,
        move_cost: 0.04,
        slip: 0.15,
        crowd_slip: 0.0,
    }
}

pub fn chain6() -> TabularInstance {
    chain6_params().build()
}

/// The three instances exercised by the acceptance suite, with names.
pub fn bundled() -> Vec<(&'static str, CongestionParams)> {
    vec![
        ("congestion4", congestion4_params()),
        ("congestion8", congestion8_params()),
        ("chain6", chain6_params()),
    ]
}

/// Parses the instance file format described in the module docs.
pub fn parse_instance(text: &str) -> Result<CongestionParams, TabularError> {
    let err = |line: usize, message: &str| TabularError::Parse {
        line,
        message: message.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next = |what: &str| lines.next().ok_or(err(0, &format!("missing {what} line")));

    let (ln, magic) = next("header")?;
    if magic != "dmfg-instance v1" {
        return Err(err(ln, "expected header `dmfg-instance v1`"));
    }
    let (ln, dims) = next("dimensions")?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(err(ln, "expected `S A beta R_max`"));
    }
    let state_count: usize = parts[0].parse().map_err(|_| err(ln, "bad state count"))?;
    let action_count: usize = parts[1].parse().map_err(|_| err(ln, "bad action count"))?;
    let discount: f64 = parts[2].parse().map_err(|_| err(ln, "bad discount"))?;
    let r_max: f64 = parts[3].parse().map_err(|_| err(ln, "bad R_max"))?;
    if state_count == 0 || action_count == 0 {
        return Err(err(ln, "state and action counts must be positive"));
    }
    if !(0.0..1.0).contains(&discount) {
        return Err(err(ln, "discount must be in [0, 1)"));
    }

    let parse_vec = |ln: usize, line: &str, tag: &str, n: usize| -> Result<Vec<f64>, TabularError> {
        let mut it = line.split_whitespace();
        if it.next() != Some(tag) {
            return Err(err(ln, &format!("expected `{tag} ...`")));
        }
        let vals: Result<Vec<f64>, _> = it.map(|p| p.parse::<f64>()).collect();
        let vals = vals.map_err(|_| err(ln, &format!("bad number in `{tag}`")))?;
        if vals.len() != n {
            return Err(err(ln, &format!("`{tag}` needs {n} values, got {}", vals.len())));
        }
        Ok(vals)
    };
    let parse_scalar = |ln: usize, line: &str, tag: &str| -> Result<f64, TabularError> {
        Ok(parse_vec(ln, line, tag, 1)?[0])
    };

    let (ln, mu0_line) = next("mu0")?;
    let initial_mean_field = parse_vec(ln, mu0_line, "mu0", state_count)?;
    Distribution::new(initial_mean_field.clone())
        .map_err(|e| err(ln, &format!("mu0 is not a distribution: {e}")))?;

    let (ln, fam) = next("family")?;
    if fam != "congestion" {
        return Err(err(ln, "unknown instance family (expected `congestion`)"));
    }
    let (ln, base_line) = next("base")?;
    let base = parse_vec(ln, base_line, "base", state_count)?;
    let (ln, cw) = next("congestion_weight")?;
    let congestion_weight = parse_scalar(ln, cw, "congestion_weight")?;
    let (ln, mc) = next("move_cost")?;
    let move_cost = parse_scalar(ln, mc, "move_cost")?;
    let (ln, sl) = next("slip")?;
    let slip = parse_scalar(ln, sl, "slip")?;
    let (ln, cs) = next("crowd_slip")?;
    let crowd_slip = parse_scalar(ln, cs, "crowd_slip")?;
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, "unexpected trailing content"));
    }
    Ok(CongestionParams {
        state_count,
        action_count,
        discount,
        r_max,
        initial_mean_field,
        base,
        congestion_weight,
        move_cost,
        slip,
        crowd_slip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        for (_, params) in bundled() {
            let text = params.to_file_string();
            let parsed = parse_instance(&text).unwrap();
            assert_eq!(parsed, params);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "dmfg-instance v1\n4 2 0.9 1.0\nmu0 0.25 0.25 0.25\ncongestion\n";
        match parse_instance(bad) {
            Err(TabularError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_header = "something else\n";
        assert!(matches!(
            parse_instance(bad_header),
            Err(TabularError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let mut text = String::from("# a comment\n\n");
        text.push_str(&congestion4_params().to_file_string());
        assert_eq!(parse_instance(&text).unwrap(), congestion4_params());
    }

    #[test]
    fn shipped_instance_files_match_bundled_definitions() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../instances");
        for (name, params) in bundled() {
            let path = root.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(
                parse_instance(&text).unwrap(),
                params,
                "{name}.txt drifted from the bundled definition"
            );
        }
    }

    #[test]
    fn transition_rows_are_valid_on_sampled_mean_fields() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for (_, params) in bundled() {
            let inst = params.build();
            for _ in 0..20 {
                let mu = super::super::random_simplex(inst.state_count(), &mut rng);
                for s in 0..inst.state_count() {
                    for a in 0..inst.action_count() {
                        let p = inst.transition(s, a, &mu);
                        assert_eq!(p.support_size(), inst.state_count());
                        let r = inst.reward(s, a, &mu);
                        assert!(r >= 0.0 && r <= inst.r_max());
                    }
                }
            }
        }
    }
}
