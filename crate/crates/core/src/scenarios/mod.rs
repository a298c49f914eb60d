//! End-to-end scenarios built from the protocol engines, driven by a
//! [`ScenarioConfig`].

use thiserror::Error;

use crate::config::{ConfigError, Scenario, ScenarioConfig};
use crate::world::{World, WorldError};

pub mod bonding;
pub mod pos;
pub mod prepaid;
pub mod restriction;

pub use bonding::{scenario_bonding, BondingOutcome};
pub use pos::{scenario_pos, PosOutcome};
pub use prepaid::{scenario_prepaid, PrepaidOutcome, PrepaidState, Purchase};
pub use restriction::RestrictionOutcome;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("world setup: {0}")]
    Setup(#[from] WorldError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Prepaid(PrepaidOutcome),
    Bonding(BondingOutcome),
    Pos(PosOutcome),
    Restriction(RestrictionOutcome),
}

impl Outcome {
    /// Exit status 0 iff this holds.
    pub fn success(&self) -> bool {
        match self {
            Outcome::Prepaid(p) => p.attempts.iter().all(|a| a.decision.is_grant()),
            Outcome::Bonding(b) => b.decisions.iter().all(|d| d.is_grant()),
            Outcome::Pos(p) => p.transposition.completed && p.decision.is_grant(),
            Outcome::Restriction(r) => r.holder_decision().is_grant(),
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Outcome::Prepaid(p) => {
                let granted = p.attempts.iter().filter(|a| a.decision.is_grant()).count();
                format!("{granted}/{} granted", p.attempts.len())
            }
            Outcome::Bonding(b) => b.decisions.iter().map(|d| d.summary()).collect::<Vec<_>>().join(","),
            Outcome::Pos(p) if p.transposition.completed => "completed".into(),
            Outcome::Pos(_) => "failed".into(),
            Outcome::Restriction(r) => r.holder_decision().summary(),
        }
    }

    /// Scenario-specific record fields, in a fixed order.
    pub fn fields(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: String, v: String| out.push((k, v));
        let total = |t: Option<u64>| t.map_or("unreadable".to_string(), |t| t.to_string());
        match self {
            Outcome::Prepaid(p) => {
                push("initial_total".into(), p.initial.to_string());
                for (i, a) in p.attempts.iter().enumerate() {
                    push(format!("attempt.{i}.units"), a.units.to_string());
                    push(format!("attempt.{i}.decision"), a.decision.summary());
                    push(format!("attempt.{i}.total_after"), total(a.total_after));
                }
                push("final_total".into(), total(p.final_total));
            }
            Outcome::Bonding(b) => {
                push(
                    "revoked_before".into(),
                    b.revoked_before.map_or("none".into(), |i| i.to_string()),
                );
                for (i, d) in b.decisions.iter().enumerate() {
                    push(format!("request.{i}.decision"), d.summary());
                }
            }
            Outcome::Pos(p) => {
                let t = &p.transposition;
                push("step_a".into(), t.step_a.to_string());
                push("step_b".into(), t.step_b.to_string());
                push("completed".into(), t.completed.to_string());
                let view: Vec<&str> = t.a_view_identities.iter().map(String::as_str).collect();
                push("a_view_identities".into(), format!("[{}]", view.join(",")));
                push("decision".into(), p.decision.summary());
                push("item_price".into(), p.item_price.to_string());
            }
            Outcome::Restriction(r) => {
                for (name, d) in &r.decisions {
                    push(format!("decision.{name}"), d.summary());
                }
            }
        }
        out
    }
}

/// A finished run: the world it left behind and what came out of it.
#[derive(Debug)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub world: World,
    pub outcome: Outcome,
}

/// Build the world described by `config` and run its scenario.
pub fn run(config: &ScenarioConfig) -> Result<ScenarioRun, ScenarioError> {
    config.validate()?;
    let script = config.adversary.entries()?;
    let mut world = World::new(config.run.seed, config.adversary.rules()?);
    if let Some(b) = config.run.step_budget {
        world.fabric.set_budget(b);
    }
    world.fabric.transcript_mut().header = config.to_header();
    let outcome = match config.run.scenario {
        Scenario::Prepaid => Outcome::Prepaid(prepaid::run(&mut world, &config.prepaid)?),
        Scenario::Bonding => Outcome::Bonding(bonding::run(&mut world, &config.bonding)?),
        Scenario::Pos => Outcome::Pos(pos::run(&mut world, &config.pos)?),
        Scenario::Restriction => Outcome::Restriction(restriction::run(&mut world, &config.restriction, &script)?),
    };
    Ok(ScenarioRun {
        config: config.clone(),
        world,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_runs_honestly() {
        for s in Scenario::ALL {
            let r = run(&ScenarioConfig::new(s)).unwrap();
            assert!(r.outcome.success(), "{s}: {:?}", r.outcome);
        }
    }

    #[test]
    fn transcript_header_carries_the_config() {
        let r = run(&ScenarioConfig::new(Scenario::Pos)).unwrap();
        let t = r.world.fabric.transcript();
        assert_eq!(ScenarioConfig::from_header(&t.header).unwrap(), r.config);
    }

    #[test]
    fn clone_script_reaches_the_attacker() {
        let mut c = ScenarioConfig::new(Scenario::Restriction);
        c.restriction.attacker = Some("rogue".into());
        c.adversary.script = vec!["clone_credential:phone-a".into()];
        let r = run(&c).unwrap();
        assert_eq!(
            r.outcome.fields(),
            vec![
                ("decision.phone-a".to_string(), "grant/privileged".to_string()),
                ("decision.rogue".to_string(), "deny(clone_detected)".to_string()),
            ]
        );
    }
}
