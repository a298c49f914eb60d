//! Restriction on its own: one principal, its device, and optionally a
//! second device that may carry a copy of the first one's γ.

use crate::config::{RestrictionSection, ScriptEntry};
use crate::operations::{run_restriction, AccessDecision, RestrictionRequest};
use crate::world::{World, WorldError};

const GROUP_SLOT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestrictionOutcome {
    pub holder: String,
    /// In request order.
    pub decisions: Vec<(String, AccessDecision)>,
}

impl RestrictionOutcome {
    pub fn holder_decision(&self) -> &AccessDecision {
        &self
            .decisions
            .iter()
            .find(|(n, _)| *n == self.holder)
            .expect("holder always requests")
            .1
    }
}

pub fn setup(world: &mut World, cfg: &RestrictionSection, script: &[ScriptEntry]) -> Result<(), WorldError> {
    world.add_principal(&cfg.principal)?;
    for a in std::iter::once(&cfg.agent).chain(&cfg.attacker) {
        world.add_agent(a, &cfg.principal)?;
        world.issue_gamma(a)?;
        world.enroll_tau(a, cfg.enrolment)?;
        world.distribute_group_secret(a, GROUP_SLOT)?;
    }
    if let Some(attacker) = &cfg.attacker {
        for e in script {
            if let ScriptEntry::Clone { victim } = e {
                world.clone_gamma(victim, attacker)?;
            }
        }
    }
    Ok(())
}

pub fn run(world: &mut World, cfg: &RestrictionSection, script: &[ScriptEntry]) -> Result<RestrictionOutcome, WorldError> {
    setup(world, cfg, script)?;
    let mut order: Vec<&String> = std::iter::once(&cfg.agent).chain(&cfg.attacker).collect();
    if cfg.attacker_first {
        order.reverse();
    }
    let decisions = order
        .into_iter()
        .map(|a| {
            let mut req = RestrictionRequest::new(&cfg.principal, a, cfg.variant);
            req.present_tau = cfg.present_tau;
            (a.clone(), run_restriction(world, &req))
        })
        .collect();
    Ok(RestrictionOutcome {
        holder: cfg.agent.clone(),
        decisions,
    })
}
