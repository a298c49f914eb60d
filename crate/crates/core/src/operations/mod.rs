//! Protocol engines for restriction, subordination and transposition.

use std::fmt;
use std::str::FromStr;

use crate::credentials::ActorId;
use crate::fabric::{MessageKind, SessionId};
use crate::wire::Verdict as VerdictMsg;
use crate::world::World;

pub mod restriction;
pub mod subordination;
pub mod transposition;

pub use restriction::{run_restriction, RestrictionRequest, RestrictionVariant};
pub use subordination::{run_subordination, SubordinationRequest, SubordinationVariant};
pub use transposition::{
    pinned_sequence, run_transposition, PrivacyMode, SecondaryAuth, StepFailure, StepOrder, StepResult,
    TranspositionOutcome, TranspositionRequest,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Grant,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Privilege {
    Base,
    Privileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reason {
    Ok,
    CloneDetected,
    IntegrityMismatch,
    Revoked,
    NoAssociation,
    Policy,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Grant => "grant",
            Verdict::Deny => "deny",
        }
    }
}

impl Privilege {
    pub fn as_str(self) -> &'static str {
        match self {
            Privilege::Base => "base",
            Privilege::Privileged => "privileged",
        }
    }

    fn code(self) -> u8 {
        match self {
            Privilege::Base => 0,
            Privilege::Privileged => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Privilege::Base),
            1 => Some(Privilege::Privileged),
            _ => None,
        }
    }
}

impl Reason {
    pub const ALL: [Reason; 6] = [
        Reason::Ok,
        Reason::CloneDetected,
        Reason::IntegrityMismatch,
        Reason::Revoked,
        Reason::NoAssociation,
        Reason::Policy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::CloneDetected => "clone_detected",
            Reason::IntegrityMismatch => "integrity_mismatch",
            Reason::Revoked => "revoked",
            Reason::NoAssociation => "no_association",
            Reason::Policy => "policy",
        }
    }

    pub fn code(self) -> u8 {
        Reason::ALL.iter().position(|r| *r == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Reason::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown reason {s}"))
    }
}

/// Outcome of an access request, as the requesting agent ends up with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessDecision {
    pub subject: ActorId,
    pub verdict: Verdict,
    pub privilege: Privilege,
    pub reason: Reason,
    /// Transport-level cause behind a deny, if any.
    pub detail: Option<String>,
}

impl AccessDecision {
    pub fn grant(subject: ActorId, privilege: Privilege) -> Self {
        AccessDecision {
            subject,
            verdict: Verdict::Grant,
            privilege,
            reason: Reason::Ok,
            detail: None,
        }
    }

    pub fn deny(subject: ActorId, reason: Reason) -> Self {
        debug_assert!(reason != Reason::Ok);
        AccessDecision {
            subject,
            verdict: Verdict::Deny,
            privilege: Privilege::Base,
            reason,
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl fmt::Display) -> Self {
        self.detail = Some(detail.to_string());
        self
    }

    pub fn is_grant(&self) -> bool {
        self.verdict == Verdict::Grant
    }

    /// `grant/privileged`, `deny(revoked)` and so on.
    pub fn summary(&self) -> String {
        match self.verdict {
            Verdict::Grant => format!("grant/{}", self.privilege.as_str()),
            Verdict::Deny => format!("deny({})", self.reason),
        }
    }
}

impl fmt::Display for AccessDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.subject.name, self.summary())?;
        if let Some(d) = &self.detail {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

/// Send `decision` from `decider` to the agent and return what the agent
/// ends up with: a grant that never arrives intact is a deny.
pub(crate) fn announce(
    world: &mut World,
    session: Option<SessionId>,
    decider: &str,
    agent: &str,
    decision: AccessDecision,
) -> AccessDecision {
    let (kind, code) = match decision.verdict {
        Verdict::Grant => (MessageKind::ServiceGrant, decision.privilege.code()),
        Verdict::Deny => (MessageKind::ServiceDeny, decision.reason.code()),
    };
    let received = world.transfer(decider, agent, session, kind, VerdictMsg { code }.encode(), VerdictMsg::decode);
    match received {
        Ok((seq, msg)) => {
            let understood = match decision.verdict {
                Verdict::Grant => Privilege::from_code(msg.code).is_some(),
                Verdict::Deny => Reason::from_code(msg.code).is_some(),
            };
            if !understood {
                world.reject(seq);
            }
            decision
        }
        Err(f) if decision.is_grant() => AccessDecision::deny(decision.subject, Reason::Policy).with_detail(f),
        Err(_) => decision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reason_codes_round_trip() {
        for r in Reason::ALL {
            assert_eq!(Reason::from_code(r.code()), Some(r));
            assert_eq!(r.as_str().parse::<Reason>(), Ok(r));
        }
        assert_eq!(Reason::from_code(6), None);
    }

    #[test]
    fn decision_invariants() {
        let id = ActorId::agent("phone", "mno");
        let g = AccessDecision::grant(id.clone(), Privilege::Privileged);
        assert!(g.is_grant() && g.reason == Reason::Ok);
        assert_eq!(g.summary(), "grant/privileged");
        let d = AccessDecision::deny(id, Reason::Revoked);
        assert_eq!(d.privilege, Privilege::Base);
        assert_eq!(d.summary(), "deny(revoked)");
    }
}
