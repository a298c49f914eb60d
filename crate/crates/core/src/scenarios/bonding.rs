//! Accessory bonding: a camera that only works through a phone of the
//! MNO that subsidised it.

use crate::config::BondingSection;
use crate::credentials::{EnrolmentMode, SubordinationScope};
use crate::operations::{run_subordination, AccessDecision, SubordinationRequest};
use crate::world::{World, WorldError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BondingOutcome {
    pub decisions: Vec<AccessDecision>,
    /// Request index before which the backing key was revoked.
    pub revoked_before: Option<usize>,
}

pub fn setup(world: &mut World, cfg: &BondingSection) -> Result<(), WorldError> {
    let domain = cfg.phone_domain();
    world.add_principal(&cfg.mno)?;
    if domain != cfg.mno {
        world.add_principal(domain)?;
    }
    world.add_agent(&cfg.phone, domain)?;
    world.add_agent(&cfg.camera, &cfg.mno)?;
    world.issue_gamma(&cfg.phone)?;
    world.enroll_tau(&cfg.phone, EnrolmentMode::PrincipalControlled)?;
    world.issue_sigma(domain, &cfg.phone, SubordinationScope::Dominator, &[], None)?;
    let services: Vec<&str> = cfg.services.iter().map(String::as_str).collect();
    world.issue_sigma(&cfg.mno, &cfg.camera, SubordinationScope::Subordinate, &services, Some(cfg.slot))?;
    world.publish_reference(&cfg.phone, &cfg.camera)?;
    world.publish_reference(&cfg.camera, &cfg.phone)?;
    Ok(())
}

/// Revoke the key backing the accessory's σ.
pub fn revoke_backing(world: &mut World, camera: &str) -> Result<(), WorldError> {
    let key = world
        .agent(camera)?
        .sigma
        .as_ref()
        .map(|s| s.backing.key_id())
        .ok_or_else(|| WorldError::NotAnAgent(camera.to_string()))?;
    world.revoke_key(camera, &key)
}

pub fn scenario_bonding(world: &mut World, cfg: &BondingSection, service: &str) -> AccessDecision {
    run_subordination(
        world,
        &SubordinationRequest::new(&cfg.mno, &cfg.phone, &cfg.camera, service, cfg.variant),
    )
}

pub fn run(world: &mut World, cfg: &BondingSection) -> Result<BondingOutcome, WorldError> {
    setup(world, cfg)?;
    let mut decisions = Vec::with_capacity(cfg.requests);
    for i in 0..cfg.requests {
        if cfg.revoke_before == Some(i) {
            revoke_backing(world, &cfg.camera)?;
        }
        decisions.push(scenario_bonding(world, cfg, &cfg.service));
    }
    Ok(BondingOutcome {
        decisions,
        revoked_before: cfg.revoke_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operations::SubordinationVariant;

    fn outcome(cfg: &BondingSection) -> Vec<String> {
        let mut w = World::new(42, vec![]);
        run(&mut w, cfg).unwrap().decisions.iter().map(|d| d.summary()).collect()
    }

    #[test]
    fn same_mno_phone_grants_in_both_variants() {
        for variant in SubordinationVariant::ALL {
            let c = BondingSection {
                variant,
                ..BondingSection::default()
            };
            assert_eq!(outcome(&c), ["grant/base"], "{variant}");
        }
    }

    #[test]
    fn other_mno_phone_is_denied() {
        for variant in SubordinationVariant::ALL {
            let c = BondingSection {
                variant,
                phone_domain: Some("mno-rival".into()),
                ..BondingSection::default()
            };
            assert_eq!(outcome(&c), ["deny(policy)"], "{variant}");
        }
    }

    #[test]
    fn revocation_holds_for_every_later_request() {
        let c = BondingSection {
            requests: 4,
            revoke_before: Some(1),
            ..BondingSection::default()
        };
        assert_eq!(outcome(&c), ["grant/base", "deny(revoked)", "deny(revoked)", "deny(revoked)"]);
    }

    #[test]
    fn unlisted_service_is_denied() {
        let c = BondingSection {
            service: "firmware_flash".into(),
            ..BondingSection::default()
        };
        assert_eq!(outcome(&c), ["deny(policy)"]);
    }
}
