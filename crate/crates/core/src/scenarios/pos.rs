//! Point-of-sale purchase: the POS learns it may serve a customer it has
//! no relationship with, vouched for by the customer's MNO.

use crate::config::PosSection;
use crate::credentials::EnrolmentMode;
use crate::operations::{
    announce, run_transposition, AccessDecision, Privilege, Reason, StepFailure, StepResult, TranspositionOutcome,
    TranspositionRequest,
};
use crate::world::{World, WorldError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosOutcome {
    pub transposition: TranspositionOutcome,
    /// What the phone ends up with from the POS.
    pub decision: AccessDecision,
    pub item_price: u64,
}

pub fn setup(world: &mut World, cfg: &PosSection) -> Result<(), WorldError> {
    world.add_principal(&cfg.mno)?;
    world.add_principal(&cfg.owner)?;
    world.add_agent(&cfg.phone, &cfg.mno)?;
    world.add_agent(&cfg.pos, &cfg.owner)?;
    for a in [&cfg.phone, &cfg.pos] {
        world.issue_gamma(a)?;
        world.enroll_tau(a, EnrolmentMode::PrincipalControlled)?;
    }
    world.publish_reference(&cfg.phone, &cfg.pos)?;
    world.publish_reference(&cfg.pos, &cfg.phone)?;
    Ok(())
}

pub fn request(cfg: &PosSection) -> TranspositionRequest {
    TranspositionRequest {
        order: cfg.step_order,
        secondary: cfg.secondary_auth,
        ..TranspositionRequest::new(&cfg.mno, &cfg.phone, &cfg.owner, &cfg.pos, cfg.privacy)
    }
}

fn reason_for(f: StepFailure) -> Reason {
    match f {
        StepFailure::IntegrityMismatch => Reason::IntegrityMismatch,
        StepFailure::Revoked => Reason::Revoked,
        StepFailure::NoAssociation => Reason::NoAssociation,
        _ => Reason::Policy,
    }
}

/// Full transposition, then the POS serves or refuses the item. The price
/// is carried for the record; payment itself is not modelled.
pub fn scenario_pos(world: &mut World, req: &TranspositionRequest, _item_price: u64) -> (TranspositionOutcome, AccessDecision) {
    let out = run_transposition(world, req);
    let subject = world.agent(&req.phone).expect("phone exists").id.clone();
    let decision = if out.completed {
        AccessDecision::grant(subject, Privilege::Base)
    } else {
        let (step, failure) = match (out.step_a, out.step_b) {
            (StepResult::Failed(f), _) => ("step_a", f),
            (_, StepResult::Failed(f)) => ("step_b", f),
            _ => unreachable!("incomplete run has a failed step"),
        };
        AccessDecision::deny(subject, reason_for(failure)).with_detail(format!("{step} {failure}"))
    };
    world.fabric.reset_steps();
    let sid = world.session_between(&req.pos, &req.phone);
    let decision = announce(world, sid, &req.pos, &req.phone, decision);
    world.drain();
    (out, decision)
}

pub fn run(world: &mut World, cfg: &PosSection) -> Result<PosOutcome, WorldError> {
    setup(world, cfg)?;
    let (transposition, decision) = scenario_pos(world, &request(cfg), cfg.item_price);
    Ok(PosOutcome {
        transposition,
        decision,
        item_price: cfg.item_price,
    })
}
