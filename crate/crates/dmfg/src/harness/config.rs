//! Plain-text run configuration: flat `key = value` lines with dotted keys.
//!
//! `#` starts a comment, blank lines are ignored, later assignments win.
//! `dump_defaults` emits every key with its default so a config file can be
//! generated, edited, and diffed. Validation collects *all* violations so a
//! bad file is reported once, completely.

use super::{RunConfig, TeamPolicy};
use crate::envs::EnvName;

/// Renders every key of a resolved config in canonical order.
pub fn render_config(config: &RunConfig) -> String {
    let g = &config.grid;
    let r = &g.rewards;
    let h = &config.hp;
    let mut out = String::new();
    let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    push("env.name", config.env.to_string());
    push("env.width", g.width.to_string());
    push("env.height", g.height.to_string());
    push("env.step_cap", g.step_cap.to_string());
    push("env.view_radius", g.view_radius.to_string());
    push("env.attack_radius", g.attack_radius.to_string());
    push("env.max_hp", format!("{:?}", g.max_hp));
    push("env.team_size", g.team_size.to_string());
    push("env.gather_agents", g.gather_agents.to_string());
    push("env.food_count", g.food_count.to_string());
    push("env.tiger_count", g.tiger_count.to_string());
    push("env.deer_count", g.deer_count.to_string());
    push("env.ranged_per_team", g.ranged_per_team.to_string());
    push("env.melee_per_team", g.melee_per_team.to_string());
    push("env.ranged_attack_radius", g.ranged_attack_radius.to_string());
    push("env.ranged_max_hp", format!("{:?}", g.ranged_max_hp));
    push("reward.attack_hit", format!("{:?}", r.attack_hit));
    push("reward.kill", format!("{:?}", r.kill));
    push("reward.step", format!("{:?}", r.step));
    push("reward.death", format!("{:?}", r.death));
    push("reward.attack_penalty", format!("{:?}", r.attack_penalty));
    push("reward.hp_damage", format!("{:?}", r.hp_damage));
    push("reward.hp_recover", format!("{:?}", r.hp_recover));
    push("reward.gather_step", format!("{:?}", r.gather_step));
    push(
        "reward.gather_attack_penalty",
        format!("{:?}", r.gather_attack_penalty),
    );
    push("reward.gather_death", format!("{:?}", r.gather_death));
    push("reward.food_attack", format!("{:?}", r.food_attack));
    push("reward.food_capture", format!("{:?}", r.food_capture));
    push("reward.food_hp", r.food_hp.to_string());
    push(
        "reward.tiger_joint_attack",
        format!("{:?}", r.tiger_joint_attack),
    );
    push(
        "reward.tiger_solo_attack",
        format!("{:?}", r.tiger_solo_attack),
    );
    push("reward.tiger_hp_drain", format!("{:?}", r.tiger_hp_drain));
    push("reward.tiger_eat_hp", format!("{:?}", r.tiger_eat_hp));
    push("reward.deer_hp", format!("{:?}", r.deer_hp));
    for (i, policy) in config.team_policies.iter().enumerate() {
        push(&format!("algo.team{i}"), policy.to_string());
    }
    push("train.episodes", config.episodes.to_string());
    push(
        "train.seeds",
        config
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    push("train.checkpoint_every", config.checkpoint_every.to_string());
    push("train.trace", config.write_trace.to_string());
    push("exec.games", config.exec_games.to_string());
    push("exec.seed_base", config.exec_seed_base.to_string());
    push("hp.q_lr", format!("{:?}", h.q_lr));
    push("hp.actor_lr", format!("{:?}", h.actor_lr));
    push("hp.critic_lr", format!("{:?}", h.critic_lr));
    push("hp.estimator_lr", format!("{:?}", h.estimator_lr));
    push("hp.gamma", format!("{:?}", h.gamma));
    push("hp.boltzmann_temp", format!("{:?}", h.boltzmann_temp));
    push("hp.epsilon_start", format!("{:?}", h.epsilon_start));
    push("hp.epsilon_end", format!("{:?}", h.epsilon_end));
    push("hp.buffer_capacity", h.buffer_capacity.to_string());
    push("hp.batch_size", h.batch_size.to_string());
    push("hp.tau", format!("{:?}", h.tau));
    push("hp.hidden", h.hidden.to_string());
    out
}

/// Full default config text for an environment.
pub fn dump_defaults(env: EnvName) -> String {
    render_config(&RunConfig::default_for(env))
}

fn apply_key(config: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse::<T>()
            .map_err(|_| format!("{key}: cannot parse `{value}`"))
    }
    let g = &mut config.grid;
    let r = &mut g.rewards;
    let h = &mut config.hp;
    match key {
        "env.name" => {
            // handled in the first pass; accept silently here
            EnvName::parse(value).ok_or(format!(
                "env.name: unknown environment `{value}` (battle, gather, tiger_deer, combined_arms)"
            ))?;
        }
        "env.width" => g.width = num(key, value)?,
        "env.height" => g.height = num(key, value)?,
        "env.step_cap" => g.step_cap = num(key, value)?,
        "env.view_radius" => g.view_radius = num(key, value)?,
        "env.attack_radius" => g.attack_radius = num(key, value)?,
        "env.max_hp" => g.max_hp = num(key, value)?,
        "env.team_size" => g.team_size = num(key, value)?,
        "env.gather_agents" => g.gather_agents = num(key, value)?,
        "env.food_count" => g.food_count = num(key, value)?,
        "env.tiger_count" => g.tiger_count = num(key, value)?,
        "env.deer_count" => g.deer_count = num(key, value)?,
        "env.ranged_per_team" => g.ranged_per_team = num(key, value)?,
        "env.melee_per_team" => g.melee_per_team = num(key, value)?,
        "env.ranged_attack_radius" => g.ranged_attack_radius = num(key, value)?,
        "env.ranged_max_hp" => g.ranged_max_hp = num(key, value)?,
        "reward.attack_hit" => r.attack_hit = num(key, value)?,
        "reward.kill" => r.kill = num(key, value)?,
        "reward.step" => r.step = num(key, value)?,
        "reward.death" => r.death = num(key, value)?,
        "reward.attack_penalty" => r.attack_penalty = num(key, value)?,
        "reward.hp_damage" => r.hp_damage = num(key, value)?,
        "reward.hp_recover" => r.hp_recover = num(key, value)?,
        "reward.gather_step" => r.gather_step = num(key, value)?,
        "reward.gather_attack_penalty" => r.gather_attack_penalty = num(key, value)?,
        "reward.gather_death" => r.gather_death = num(key, value)?,
        "reward.food_attack" => r.food_attack = num(key, value)?,
        "reward.food_capture" => r.food_capture = num(key, value)?,
        "reward.food_hp" => r.food_hp = num(key, value)?,
        "reward.tiger_joint_attack" => r.tiger_joint_attack = num(key, value)?,
        "reward.tiger_solo_attack" => r.tiger_solo_attack = num(key, value)?,
        "reward.tiger_hp_drain" => r.tiger_hp_drain = num(key, value)?,
        "reward.tiger_eat_hp" => r.tiger_eat_hp = num(key, value)?,
        "reward.deer_hp" => r.deer_hp = num(key, value)?,
        "train.episodes" => config.episodes = num(key, value)?,
        "train.seeds" => {
            let seeds: Result<Vec<u64>, _> =
                value.split(',').map(|s| s.trim().parse::<u64>()).collect();
            config.seeds = seeds.map_err(|_| format!("{key}: bad seed list `{value}`"))?;
        }
        "train.checkpoint_every" => config.checkpoint_every = num(key, value)?,
        "train.trace" => config.write_trace = num(key, value)?,
        "exec.games" => config.exec_games = num(key, value)?,
        "exec.seed_base" => config.exec_seed_base = num(key, value)?,
        "hp.q_lr" => h.q_lr = num(key, value)?,
        "hp.actor_lr" => h.actor_lr = num(key, value)?,
        "hp.critic_lr" => h.critic_lr = num(key, value)?,
        "hp.estimator_lr" => h.estimator_lr = num(key, value)?,
        "hp.gamma" => h.gamma = num(key, value)?,
        "hp.boltzmann_temp" => h.boltzmann_temp = num(key, value)?,
        "hp.epsilon_start" => h.epsilon_start = num(key, value)?,
        "hp.epsilon_end" => h.epsilon_end = num(key, value)?,
        "hp.buffer_capacity" => h.buffer_capacity = num(key, value)?,
        "hp.batch_size" => h.batch_size = num(key, value)?,
        "hp.tau" => h.tau = num(key, value)?,
        "hp.hidden" => h.hidden = num(key, value)?,
        k if k.starts_with("algo.team") => {
            let idx: usize = k["algo.team".len()..]
                .parse()
                .map_err(|_| format!("{k}: bad team index"))?;
            if idx >= config.team_policies.len() {
                return Err(format!(
                    "{k}: env {} has only {} team(s)",
                    config.env,
                    config.team_policies.len()
                ));
            }
            config.team_policies[idx] = TeamPolicy::parse(value).ok_or(format!(
                "{k}: unknown algorithm `{value}` (valid: dmfg-ql, dmfg-ac, il, mfq, mfac, scripted:<action>)"
            ))?;
        }
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn key_value_pairs(text: &str) -> Result<Vec<(String, String)>, Vec<String>> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => errors.push(format!("line {}: expected `key = value`", lineno + 1)),
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(errors)
    }
}

/// Parses a config file plus command-line overrides (`key=value` pairs,
/// applied last). Returns every violation at once on failure.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, Vec<String>> {
    let mut pairs = key_value_pairs(text)?;
    pairs.extend(overrides.iter().cloned());
    // env.name decides the defaults, so resolve it first
    let env = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "env.name")
        .and_then(|(_, v)| EnvName::parse(v))
        .unwrap_or(EnvName::Battle);
    let mut config = RunConfig::default_for(env);
    let mut errors = Vec::new();
    for (key, value) in &pairs {
        if let Err(e) = apply_key(&mut config, key, value) {
            errors.push(e);
        }
    }
    // cross-field validation
    if config.episodes == 0 {
        errors.push("train.episodes must be at least 1".into());
    }
    if config.seeds.is_empty() {
        errors.push("train.seeds must list at least one seed".into());
    }
    if config.checkpoint_every == 0 {
        errors.push("train.checkpoint_every must be positive".into());
    }
    if !(0.0..1.0).contains(&config.hp.gamma) {
        errors.push(format!("hp.gamma {} must be in [0, 1)", config.hp.gamma));
    }
    if config.hp.batch_size == 0 {
        errors.push("hp.batch_size must be positive".into());
    }
    if !(config.hp.tau > 0.0 && config.hp.tau <= 1.0) {
        errors.push(format!("hp.tau {} must be in (0, 1]", config.hp.tau));
    }
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::Algorithm;

    #[test]
    fn defaults_round_trip_for_every_env() {
        for env in EnvName::ALL {
            let text = dump_defaults(env);
            let parsed = parse_config(&text, &[]).unwrap();
            assert_eq!(render_config(&parsed), text);
        }
    }

    #[test]
    fn overrides_win_over_file_values() {
        let text = "env.name = gather\ntrain.episodes = 10\n";
        let overrides = vec![("train.episodes".to_string(), "25".to_string())];
        let config = parse_config(text, &overrides).unwrap();
        assert_eq!(config.episodes, 25);
        assert_eq!(config.env, EnvName::Gather);
        assert_eq!(config.team_policies.len(), 1);
    }

    #[test]
    fn all_violations_reported_at_once() {
        let text = "env.name = battle\nnonsense.key = 1\ntrain.episodes = zero\nhp.gamma = 1.5\nalgo.team0 = quantum\n";
        let errors = parse_config(text, &[]).unwrap_err();
        assert_eq!(errors.len(), 4, "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("unknown key")));
        assert!(errors.iter().any(|e| e.contains("train.episodes")));
        assert!(errors.iter().any(|e| e.contains("hp.gamma")));
        assert!(errors.iter().any(|e| e.contains("algo.team0")));
    }

    #[test]
    fn team_index_bounds_follow_env() {
        let text = "env.name = gather\nalgo.team1 = il\n";
        let errors = parse_config(text, &[]).unwrap_err();
        assert!(errors[0].contains("only 1 team"));
        let text = "env.name = battle\nalgo.team1 = il\n";
        let config = parse_config(text, &[]).unwrap();
        assert_eq!(config.team_policies[1], super::TeamPolicy::Learner(Algorithm::Il));
    }

    #[test]
    fn scripted_policy_parses() {
        let text = "env.name = battle\nalgo.team1 = scripted:0\n";
        let config = parse_config(text, &[]).unwrap();
        assert_eq!(config.team_policies[1], TeamPolicy::Scripted(0));
    }
}
