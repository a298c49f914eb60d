//! Attested channel establishment over the fabric.
//!
//! A channel is a DH handshake (two `ChannelHello`s), an optional γ log-on,
//! then level-1 and level-2 quotes from the initiator and, when mutual, from
//! the responder. The last verifier closes with `ChannelAccept`.

use thiserror::Error;

use crate::crypto::{dh_derive, dh_keygen, CryptoError, KeyRole, Nonce};
use crate::fabric::{MessageKind, SessionId};
use crate::tpm::{AssertionLevel, PcrSelection, QuoteRejection, TpmError};
use crate::wire::{Accept, Attest, GammaAuth, Hello, QuoteMsg};
use crate::world::{Failure, World, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Refusal {
    #[error("domain credential rejected")]
    GammaRejected,
    #[error("no domain credential to present")]
    MissingGamma,
    #[error("quote rejected: {0}")]
    Quote(QuoteRejection),
    #[error("attester key revoked")]
    AttesterRevoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("channel refused by {by}: {reason}")]
    Refused { by: String, reason: Refusal },
    #[error("transport: {0}")]
    Transport(#[from] Failure),
    #[error("key agreement: {0}")]
    Handshake(#[from] CryptoError),
    #[error("setup: {0}")]
    Setup(#[from] WorldError),
}

impl ChannelError {
    pub fn quote_rejection(&self) -> Option<QuoteRejection> {
        match self {
            ChannelError::Refused {
                reason: Refusal::Quote(r),
                ..
            } => Some(*r),
            _ => None,
        }
    }

    /// True when the failure traces back to a revoked key.
    pub fn is_revocation(&self) -> bool {
        matches!(
            self,
            ChannelError::Refused {
                reason: Refusal::AttesterRevoked | Refusal::Quote(QuoteRejection::KeyRevoked),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpec {
    pub initiator: String,
    pub responder: String,
    /// Responder attests too.
    pub mutual: bool,
    /// Initiator attests. Restriction defers this until τ is presented.
    pub attest_initiator: bool,
    /// Initiator logs on with its γ before attesting.
    pub gamma_logon: bool,
}

impl ChannelSpec {
    pub fn new(initiator: &str, responder: &str) -> Self {
        ChannelSpec {
            initiator: initiator.to_string(),
            responder: responder.to_string(),
            mutual: false,
            attest_initiator: true,
            gamma_logon: false,
        }
    }

    pub fn mutual(mut self) -> Self {
        self.mutual = true;
        self
    }

    pub fn with_gamma_logon(mut self) -> Self {
        self.gamma_logon = true;
        self
    }

    pub fn without_initiator_attestation(mut self) -> Self {
        self.attest_initiator = false;
        self
    }
}

/// Challenge the verifier expects for a quote of `level`.
pub fn level_challenge(base: &Nonce, level: AssertionLevel) -> Nonce {
    base.derive(format!("quote-l{}", level.as_u8()).as_bytes())
}

/// Handshake state each side holds once the hellos are exchanged.
#[derive(Debug, Clone, Copy)]
pub struct Challenges {
    /// Challenge the initiator issued and the responder received.
    pub from_initiator: (Nonce, Nonce),
    /// Challenge the responder issued and the initiator received.
    pub from_responder: (Nonce, Nonce),
}

pub fn establish_attested_channel(world: &mut World, spec: &ChannelSpec) -> Result<SessionId, ChannelError> {
    establish(world, spec).map(|(sid, _)| sid)
}

/// As [`establish_attested_channel`], also returning the hello challenges
/// (issued, received) so later protocol steps can derive fresh nonces.
pub fn establish(world: &mut World, spec: &ChannelSpec) -> Result<(SessionId, Challenges), ChannelError> {
    let (i, r) = (spec.initiator.as_str(), spec.responder.as_str());
    world.actor(i)?;
    world.actor(r)?;

    let (i_secret, i_public) = dh_keygen(&mut world.rng);
    let i_challenge = world.rng.nonce();
    let hello = Hello {
        dh_public: i_public,
        challenge: i_challenge,
        gamma_challenge: None,
    };
    let (_, i_hello) = world.transfer(i, r, None, MessageKind::ChannelHello, hello.encode(), Hello::decode)?;

    let (r_secret, r_public) = dh_keygen(&mut world.rng);
    let r_challenge = world.rng.nonce();
    let gamma_challenge = spec.gamma_logon.then(|| world.rng.nonce());
    let hello = Hello {
        dh_public: r_public,
        challenge: r_challenge,
        gamma_challenge,
    };
    let (_, r_hello) = world.transfer(r, i, None, MessageKind::ChannelHello, hello.encode(), Hello::decode)?;

    let i_key = dh_derive(&i_secret, &r_hello.dh_public)?.subkey(KeyRole::Transport);
    let r_key = dh_derive(&r_secret, &i_hello.dh_public)?.subkey(KeyRole::Transport);
    let sid = world.open_session(i, r, i_key, r_key);
    let challenges = Challenges {
        from_initiator: (i_challenge, i_hello.challenge),
        from_responder: (r_challenge, r_hello.challenge),
    };

    if let Some(issued) = gamma_challenge {
        let received = r_hello.gamma_challenge.unwrap_or(issued);
        gamma_logon(world, sid, i, r, issued, received)?;
    }
    if spec.attest_initiator {
        attest(world, sid, i, r, challenges.from_responder.1, challenges.from_responder.0)?;
    }
    if spec.mutual {
        attest(world, sid, r, i, challenges.from_initiator.1, challenges.from_initiator.0)?;
    }
    // the party that verified last confirms
    let (from, to) = if spec.mutual { (i, r) } else { (r, i) };
    let level = if spec.attest_initiator || spec.mutual {
        AssertionLevel::SystemIntegrity.as_u8()
    } else {
        0
    };
    world.transfer(from, to, Some(sid), MessageKind::ChannelAccept, Accept { level }.encode(), Accept::decode)?;
    Ok((sid, challenges))
}

fn gamma_logon(
    world: &mut World,
    sid: SessionId,
    agent: &str,
    principal: &str,
    issued: Nonce,
    received: Nonce,
) -> Result<(), ChannelError> {
    let gamma = world.agent(agent)?.gamma.clone().ok_or(ChannelError::Refused {
        by: agent.to_string(),
        reason: Refusal::MissingGamma,
    })?;
    let auth = GammaAuth::Direct {
        serial: gamma.serial,
        response: gamma.respond(&received),
    };
    let (seq, auth) = world.transfer(agent, principal, Some(sid), MessageKind::GammaAuth, auth.encode(), GammaAuth::decode)?;
    let serial = match auth {
        GammaAuth::Direct { serial, response }
            if world
                .principal(principal)
                .map(|p| p.registry.check_response(serial, &issued, &response))
                .unwrap_or(false) =>
        {
            serial
        }
        _ => {
            world.reject(seq);
            return Err(ChannelError::Refused {
                by: principal.to_string(),
                reason: Refusal::GammaRejected,
            });
        }
    };
    if let Some(s) = world.session_mut(sid) {
        s.gamma_serial = Some(serial);
    }
    Ok(())
}

/// `attester` presents its keys and level-1/level-2 quotes to `verifier`,
/// which gets back the keys as it received them.
/// `received` is the challenge as the attester saw it, `issued` as the
/// verifier sent it.
pub fn attest(
    world: &mut World,
    sid: SessionId,
    attester: &str,
    verifier: &str,
    received: Nonce,
    issued: Nonce,
) -> Result<Attest, ChannelError> {
    let refused = |reason| ChannelError::Refused {
        by: verifier.to_string(),
        reason,
    };
    let keys = world.agent(attester)?.attest_keys();
    let (_, keys) = world.transfer(attester, verifier, Some(sid), MessageKind::ChannelAttest, keys.encode(), Attest::decode)?;

    let l1 = AssertionLevel::Liveness;
    let quote = world.agent(attester)?.tpm.ek_prove_liveness(&level_challenge(&received, l1));
    let msg = QuoteMsg {
        quote,
        disclosed: Vec::new(),
    };
    let (seq, msg) = world.transfer(attester, verifier, Some(sid), msg.kind(), msg.encode(), QuoteMsg::decode)?;
    if msg.quote.level != l1 {
        world.reject(seq);
        return Err(refused(Refusal::Quote(QuoteRejection::Malformed)));
    }
    if let Err(e) = world.verify_quote(verifier, attester, sid, &msg, &keys.endorsement, level_challenge(&issued, l1), None) {
        world.reject(seq);
        return Err(refused(Refusal::Quote(e)));
    }

    let l2 = AssertionLevel::SystemIntegrity;
    let agent = world.agent(attester)?;
    let quote = match agent
        .tpm
        .quote_system_state(&level_challenge(&received, l2), PcrSelection::ALL, &agent.platform_aik)
    {
        Ok(q) => q,
        Err(TpmError::KeyRevoked) => {
            return Err(ChannelError::Refused {
                by: attester.to_string(),
                reason: Refusal::AttesterRevoked,
            })
        }
        Err(e) => return Err(ChannelError::Setup(e.into())),
    };
    let msg = QuoteMsg {
        quote,
        disclosed: Vec::new(),
    };
    let (seq, msg) = world.transfer(attester, verifier, Some(sid), msg.kind(), msg.encode(), QuoteMsg::decode)?;
    if msg.quote.level != l2 {
        world.reject(seq);
        return Err(refused(Refusal::Quote(QuoteRejection::Malformed)));
    }
    if let Err(e) = world.verify_quote(verifier, attester, sid, &msg, &keys.attestation, level_challenge(&issued, l2), None) {
        world.reject(seq);
        return Err(refused(Refusal::Quote(e)));
    }
    Ok(keys)
}
