//! Prepaid phone: a running total in sealed storage, decremented by the
//! phone's trusted software after each granted purchase.
//!
//! The MNO never sees the total. It sees a level-3 quote over a claim that
//! the sealed total covers the purchase, signed by the same attestation key
//! that passed level 2 in the session.

use crate::channels::level_challenge;
use crate::codec::{DecodeError, Reader, Writer};
use crate::config::PrepaidSection;
use crate::credentials::EnrolmentMode;
use crate::crypto::hash;
use crate::fabric::MessageKind;
use crate::operations::restriction::{evaluate, Admitted};
use crate::operations::{announce, AccessDecision, Privilege, Reason, RestrictionRequest};
use crate::tpm::{AssertionLevel, PcrSelection, QuoteRejection};
use crate::wire::{QuoteMsg, ServiceRequest};
use crate::world::{World, WorldError};

pub const AIRTIME: &str = "airtime";
const GROUP_SLOT: u32 = 1;

/// Where the running total lives on the phone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepaidState {
    pub slot: u32,
}

impl PrepaidState {
    /// Seal `total` under the phone's current platform state.
    pub fn install(world: &mut World, phone: &str, slot: u32, total: u64) -> Result<Self, WorldError> {
        let tpm = &mut world.agent_mut(phone)?.tpm;
        let policy = tpm.policy(PcrSelection::ALL);
        tpm.seal(slot, policy, total.to_be_bytes().to_vec())?;
        Ok(PrepaidState { slot })
    }

    /// The total as the trusted software reads it; `None` once the
    /// platform has drifted from the sealing policy.
    pub fn running_total(&self, world: &World, phone: &str) -> Option<u64> {
        let bytes = world.agent(phone).ok()?.tpm.unseal(self.slot).ok()?;
        decode_total(&bytes)
    }

    /// Raw slot contents, bypassing the policy.
    pub fn stored_total(&self, world: &World, phone: &str) -> Option<u64> {
        decode_total(world.agent(phone).ok()?.tpm.inspect_sealed(self.slot)?)
    }

    /// unseal, decrement, reseal under the same policy
    fn decrement(&self, world: &mut World, phone: &str, units: u64) -> Result<u64, String> {
        let tpm = &mut world.agent_mut(phone).map_err(|e| e.to_string())?.tpm;
        let bytes = tpm.unseal(self.slot).map_err(|e| e.to_string())?;
        let total = decode_total(&bytes).ok_or("corrupt running total")?;
        let left = total.checked_sub(units).ok_or("running total would go negative")?;
        tpm.reseal(self.slot, left.to_be_bytes().to_vec()).map_err(|e| e.to_string())?;
        Ok(left)
    }
}

fn decode_total(bytes: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(bytes.try_into().ok()?))
}

/// What the trusted software asserts about the sealed total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Claim {
    units: u64,
    sufficient: bool,
}

impl Claim {
    fn encode(&self) -> Vec<u8> {
        Writer::new()
            .str("transtrust/prepaid-claim")
            .u64(self.units)
            .u8(u8::from(self.sufficient))
            .finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.string()? != "transtrust/prepaid-claim" {
            return Err(DecodeError("claim tag"));
        }
        let units = r.u64()?;
        let sufficient = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(DecodeError("claim flag")),
        };
        r.finish()?;
        Ok(Claim { units, sufficient })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Purchase {
    pub units: u64,
    pub decision: AccessDecision,
    /// Sealed total after the attempt.
    pub total_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepaidOutcome {
    pub initial: u64,
    pub attempts: Vec<Purchase>,
    pub final_total: Option<u64>,
}

impl PrepaidOutcome {
    pub fn granted_units(&self) -> u64 {
        self.attempts
            .iter()
            .filter(|p| p.decision.is_grant())
            .map(|p| p.units)
            .sum()
    }
}

pub fn setup(world: &mut World, cfg: &PrepaidSection) -> Result<PrepaidState, WorldError> {
    world.add_principal(&cfg.mno)?;
    world.add_agent(&cfg.phone, &cfg.mno)?;
    world.issue_gamma(&cfg.phone)?;
    world.enroll_tau(&cfg.phone, EnrolmentMode::PrincipalControlled)?;
    world.distribute_group_secret(&cfg.phone, GROUP_SLOT)?;
    PrepaidState::install(world, &cfg.phone, cfg.slot, cfg.initial_total)
}

/// One purchase attempt of `units`.
pub fn scenario_prepaid(world: &mut World, req: &RestrictionRequest, state: PrepaidState, units: u64) -> AccessDecision {
    world.fabric.reset_steps();
    let (mno, phone) = (req.principal.as_str(), req.agent.as_str());
    let mut decision = match evaluate(world, req) {
        Err(refused) => announce(world, refused.session, mno, phone, refused.decision),
        Ok(admitted) => {
            let d = judge_claim(world, mno, phone, state, units, &admitted);
            announce(world, Some(admitted.session), mno, phone, d)
        }
    };
    if decision.is_grant() {
        if let Err(e) = state.decrement(world, phone, units) {
            decision = AccessDecision::deny(decision.subject, Reason::IntegrityMismatch).with_detail(e);
        }
    }
    world.drain();
    decision
}

fn judge_claim(world: &mut World, mno: &str, phone: &str, state: PrepaidState, units: u64, adm: &Admitted) -> AccessDecision {
    let subject = world.agent(phone).expect("phone exists").id.clone();
    let deny = |reason| AccessDecision::deny(subject.clone(), reason);
    let sid = adm.session;
    let keys = match (&adm.keys, adm.privilege) {
        (Some(k), Privilege::Privileged) => k.clone(),
        _ => return deny(Reason::Policy).with_detail("not in the prepaid subgroup"),
    };

    let ask = ServiceRequest {
        service: AIRTIME.into(),
        units,
    };
    let asked = match world.transfer(phone, mno, Some(sid), MessageKind::ServiceRequest, ask.encode(), ServiceRequest::decode) {
        Ok((_, r)) => r,
        Err(f) => return deny(Reason::Policy).with_detail(f),
    };

    // phone side: the trusted software states whether the total covers it
    let l3 = AssertionLevel::CredentialIntegrity;
    let Some(total) = state.running_total(world, phone) else {
        return deny(Reason::IntegrityMismatch).with_detail("running total unavailable");
    };
    let claim = Claim {
        units,
        sufficient: total > 0 && total >= units,
    }
    .encode();
    let holder = world.agent(phone).expect("phone exists");
    let accepted = world.session(sid).and_then(|s| s.level(phone));
    let received = adm.challenges.from_responder.1;
    let quote = match holder.tpm.attest_credential(
        &claim,
        &level_challenge(&received, l3),
        PcrSelection::ALL,
        &holder.platform_aik,
        accepted,
    ) {
        Ok(q) => q,
        Err(e) => return deny(Reason::IntegrityMismatch).with_detail(e),
    };
    let msg = QuoteMsg { quote, disclosed: claim };
    let (seq, msg) = match world.transfer(phone, mno, Some(sid), msg.kind(), msg.encode(), QuoteMsg::decode) {
        Ok(x) => x,
        Err(f) => return deny(Reason::Policy).with_detail(f),
    };

    // MNO side
    let issued = adm.challenges.from_responder.0;
    let digest = hash(&msg.disclosed);
    if msg.quote.level != l3 {
        world.reject(seq);
        return deny(Reason::Policy).with_detail("expected a level-3 claim");
    }
    if let Err(r) = world.verify_quote(mno, phone, sid, &msg, &keys.attestation, level_challenge(&issued, l3), Some(&digest)) {
        world.reject(seq);
        let reason = match r {
            QuoteRejection::IntegrityMismatch => Reason::IntegrityMismatch,
            QuoteRejection::KeyRevoked => Reason::Revoked,
            _ => Reason::Policy,
        };
        return deny(reason).with_detail(r);
    }
    match Claim::decode(&msg.disclosed) {
        Ok(c) if c.units == asked.units && c.sufficient => AccessDecision::grant(subject, Privilege::Privileged),
        Ok(c) if c.units == asked.units => deny(Reason::Policy).with_detail("insufficient running total"),
        _ => deny(Reason::Policy).with_detail("claim does not match the request"),
    }
}

/// All configured purchases, in order.
pub fn run(world: &mut World, cfg: &PrepaidSection) -> Result<PrepaidOutcome, WorldError> {
    let state = setup(world, cfg)?;
    let req = RestrictionRequest::new(&cfg.mno, &cfg.phone, cfg.variant);
    let mut attempts = Vec::with_capacity(cfg.purchases.len());
    for (i, &units) in cfg.purchases.iter().enumerate() {
        if cfg.drift_before == Some(i) {
            world.tamper_platform(&cfg.phone, "patched-dialer")?;
        }
        let decision = scenario_prepaid(world, &req, state, units);
        attempts.push(Purchase {
            units,
            decision,
            total_after: state.stored_total(world, &cfg.phone),
        });
    }
    if cfg.drift_before == Some(cfg.purchases.len()) {
        world.tamper_platform(&cfg.phone, "patched-dialer")?;
    }
    Ok(PrepaidOutcome {
        initial: cfg.initial_total,
        attempts,
        final_total: state.stored_total(world, &cfg.phone),
    })
}
