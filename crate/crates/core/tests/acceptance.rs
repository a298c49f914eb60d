//! One line per acceptance criterion. Each check uses its own oracle
//! rather than the invariant registry in `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transtrust::config::{Scenario, ScenarioConfig};
use transtrust::credentials::EnrolmentMode;
use transtrust::fabric::{MessageKind, Status, Transcript};
use transtrust::operations::{PrivacyMode, RestrictionVariant, StepOrder, SubordinationVariant};
use transtrust::report::{self, RunReport};
use transtrust::scenarios::{self, Outcome, ScenarioRun};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn corpus_configs() -> Vec<(String, ScenarioConfig)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(configs_dir())
        .expect("configs directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let cfg = ScenarioConfig::load(&p, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_name().unwrap().to_string_lossy().into_owned(), cfg)
        })
        .collect()
}

fn run(cfg: &ScenarioConfig) -> ScenarioRun {
    scenarios::run(cfg).unwrap_or_else(|e| panic!("{e}"))
}

fn pos_config(privacy: PrivacyMode) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(Scenario::Pos);
    c.pos.privacy = privacy;
    c
}

fn pos_outcome(r: &ScenarioRun) -> &scenarios::PosOutcome {
    match &r.outcome {
        Outcome::Pos(p) => p,
        o => panic!("not a pos outcome: {o:?}"),
    }
}

fn kinds_of(names: &str) -> Vec<MessageKind> {
    names.split_whitespace().map(|n| n.parse().unwrap()).collect()
}

fn criterion_1() -> Check {
    let channel_ba = "ChannelHello ChannelHello ChannelAttest QuoteL1 QuoteL2 ChannelAttest QuoteL1 QuoteL2 ChannelAccept";
    let channel_aa = "ChannelHello ChannelHello GammaAuth ChannelAttest QuoteL1 QuoteL2 ChannelAccept";
    let step_a = "TauPresent TauPresent TauPresent AuthRequest AuthRequest AuthRequest \
                  GammaAuth GammaAuth GammaAuth AuthAck AuthAck";
    let step_b = "TauPresent WrappedTau WrappedTau WrappedTau AuthRequest AuthAck WrappedAck WrappedAck WrappedAck";
    let mut expected = Vec::new();
    for part in [channel_ba, channel_aa, step_a, step_b] {
        expected.extend(kinds_of(part));
    }
    for privacy in PrivacyMode::ALL {
        let r = run(&pos_config(privacy));
        let t = r.world.fabric.transcript();
        let kinds: Vec<MessageKind> = t.entries.iter().map(|e| e.kind).collect();
        let Some(transposition) = kinds.get(..expected.len()) else {
            return Err(format!("{privacy}: only {} envelopes", kinds.len()));
        };
        if transposition != expected.as_slice() {
            return Err(format!("{privacy}: kinds {transposition:?}"));
        }
        if kinds[expected.len()..] != [MessageKind::ServiceGrant] {
            return Err(format!("{privacy}: trailer {:?}", &kinds[expected.len()..]));
        }
        if expected.last() != Some(&MessageKind::WrappedAck) {
            return Err("sequence does not end in WrappedAck".into());
        }
        if let Some(e) = t.entries.iter().find(|e| e.status != Status::Accepted) {
            return Err(format!("{privacy}: seq {} {}", e.seq, e.status.as_str()));
        }
    }
    Ok(format!("{} envelopes, both privacy modes", expected.len()))
}

fn criterion_2() -> Check {
    let mut tried = 0;
    for privacy in PrivacyMode::ALL {
        for order in StepOrder::ALL {
            let mut base = pos_config(privacy);
            base.pos.step_order = order;
            let honest = run(&base);
            if !pos_outcome(&honest).transposition.completed {
                return Err(format!("{privacy}/{order}: honest run did not complete"));
            }
            let t = honest.world.fabric.transcript();
            let mut counts: BTreeMap<MessageKind, usize> = BTreeMap::new();
            for e in &t.entries {
                *counts.entry(e.kind).or_default() += 1;
            }
            for kind in [MessageKind::WrappedTau, MessageKind::WrappedAck] {
                let n = counts.get(&kind).copied().unwrap_or(0);
                if n == 0 {
                    return Err(format!("{privacy}/{order}: no {kind} envelopes"));
                }
                for index in 0..n {
                    for byte in [0usize, 7, 31, 64] {
                        let mut c = base.clone();
                        c.adversary.script = vec![format!("tamper:{kind}:{index}:{byte}")];
                        let r = run(&c);
                        tried += 1;
                        if r.world.fabric.transcript().adversary.is_empty() {
                            return Err(format!("{privacy}/{order} {kind}#{index} byte {byte}: tamper never applied"));
                        }
                        if pos_outcome(&r).transposition.completed {
                            return Err(format!("{privacy}/{order} {kind}#{index} byte {byte}: still completed"));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{tried} tampered reruns, none completed"))
}

fn restriction_with_clone(variant: RestrictionVariant, enrolment: EnrolmentMode, attacker_first: bool) -> Vec<(String, String)> {
    let mut c = ScenarioConfig::new(Scenario::Restriction);
    c.restriction.variant = variant;
    c.restriction.enrolment = enrolment;
    c.restriction.attacker = Some("rogue".into());
    c.restriction.attacker_first = attacker_first;
    c.adversary.script = vec![format!("clone_credential:{}", c.restriction.agent)];
    match run(&c).outcome {
        Outcome::Restriction(r) => r.decisions.into_iter().map(|(n, d)| (n, d.summary())).collect(),
        o => panic!("not a restriction outcome: {o:?}"),
    }
}

fn criterion_3() -> Check {
    for variant in RestrictionVariant::ALL {
        for attacker_first in [false, true] {
            let d: BTreeMap<_, _> = restriction_with_clone(variant, EnrolmentMode::PrincipalControlled, attacker_first)
                .into_iter()
                .collect();
            if d.get("phone-a").map(String::as_str) != Some("grant/privileged") {
                return Err(format!("principal_controlled/{variant}: holder got {:?}", d.get("phone-a")));
            }
            if d.get("rogue").map(String::as_str) != Some("deny(clone_detected)") {
                return Err(format!("principal_controlled/{variant}: clone got {:?}", d.get("rogue")));
            }
        }
        for attacker_first in [false, true] {
            let d = restriction_with_clone(variant, EnrolmentMode::Independent, attacker_first);
            let granted: Vec<&str> = d
                .iter()
                .filter(|(_, s)| s.starts_with("grant/privileged"))
                .map(|(n, _)| n.as_str())
                .collect();
            let first = d[0].0.as_str();
            if granted != [first] {
                return Err(format!("independent/{variant}: first was {first}, granted {granted:?}"));
            }
        }
    }
    Ok("clone denied under principal control, one FCFS winner otherwise".into())
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Names of b and a found in any plaintext the MNO sent or received once
/// the channels were up.
fn raw_a_side_leaks(r: &ScenarioRun) -> Vec<String> {
    let p = &r.config.pos;
    let first_step = r
        .world
        .fabric
        .transcript()
        .entries
        .iter()
        .find(|e| e.kind == MessageKind::TauPresent)
        .map_or(u64::MAX, |e| e.seq);
    let mut found = Vec::new();
    for rec in r.world.plain_log() {
        if rec.seq < first_step || (rec.from != p.mno && rec.to != p.mno) {
            continue;
        }
        for name in [&p.phone, &p.pos] {
            if contains(&rec.plaintext, name.as_bytes()) && !found.contains(name) {
                found.push(name.clone());
            }
        }
    }
    found.sort();
    found
}

fn criterion_4() -> Check {
    let enc = run(&pos_config(PrivacyMode::Encrypted));
    let mac = run(&pos_config(PrivacyMode::MacOnly));
    let (p_enc, p_mac) = (pos_outcome(&enc), pos_outcome(&mac));
    let (phone, pos) = (&enc.config.pos.phone, &enc.config.pos.pos);
    if !p_enc.transposition.completed || !p_mac.transposition.completed {
        return Err("a run did not complete".into());
    }
    let view_enc = &p_enc.transposition.a_view_identities;
    if view_enc.contains(phone) || view_enc.contains(pos) || view_enc.iter().any(|v| v.starts_with("gamma")) {
        return Err(format!("encrypted view {view_enc:?}"));
    }
    let diff: Vec<&String> = p_mac.transposition.a_view_identities.symmetric_difference(view_enc).collect();
    if diff != [phone] {
        return Err(format!("views differ in {diff:?}"));
    }
    let (raw_enc, raw_mac) = (raw_a_side_leaks(&enc), raw_a_side_leaks(&mac));
    if !raw_enc.is_empty() {
        return Err(format!("encrypted plaintexts at the MNO name {raw_enc:?}"));
    }
    if raw_mac != [phone.clone()] {
        return Err(format!("mac_only plaintexts at the MNO name {raw_mac:?}"));
    }
    Ok(format!("mac_only reveals exactly {{{phone}}}"))
}

/// Accepted level-n quotes need an accepted level n-1 from the same
/// attester to the same verifier since their last channel hello.
fn layering_violations(t: &Transcript) -> Vec<String> {
    let mut seen: BTreeMap<(&str, &str), [bool; 3]> = BTreeMap::new();
    let mut bad = Vec::new();
    for e in t.entries.iter().filter(|e| e.status == Status::Accepted) {
        let level = match e.kind {
            MessageKind::ChannelHello => {
                seen.remove(&(e.from.as_str(), e.to.as_str()));
                seen.remove(&(e.to.as_str(), e.from.as_str()));
                continue;
            }
            MessageKind::QuoteL1 => 0,
            MessageKind::QuoteL2 => 1,
            MessageKind::QuoteL3 => 2,
            _ => continue,
        };
        let levels = seen.entry((e.from.as_str(), e.to.as_str())).or_default();
        if !levels[..level].iter().all(|&l| l) {
            bad.push(format!("seq {} {} {}->{}", e.seq, e.kind, e.from, e.to));
        }
        levels[level] = true;
    }
    bad
}

fn corpus() -> Vec<(String, ScenarioConfig)> {
    let mut all = corpus_configs();
    for privacy in PrivacyMode::ALL {
        for order in StepOrder::ALL {
            let mut c = pos_config(privacy);
            c.pos.step_order = order;
            all.push((format!("pos {privacy} {order}"), c));
        }
    }
    for variant in RestrictionVariant::ALL {
        let mut c = ScenarioConfig::new(Scenario::Prepaid);
        c.prepaid.variant = variant;
        c.prepaid.purchases = vec![2, 1, 9, 2];
        all.push((format!("prepaid {variant}"), c));
    }
    for variant in SubordinationVariant::ALL {
        let mut c = ScenarioConfig::new(Scenario::Bonding);
        c.bonding.variant = variant;
        c.bonding.requests = 3;
        all.push((format!("bonding {variant}"), c.clone()));
        c.bonding.revoke_before = Some(1);
        all.push((format!("bonding {variant} revoked"), c));
    }
    all
}

fn criterion_5() -> Check {
    let mut transcripts = 0;
    let mut quotes = 0;
    for (name, cfg) in corpus() {
        let r = run(&cfg);
        let t = r.world.fabric.transcript();
        let bad = layering_violations(t);
        if !bad.is_empty() {
            return Err(format!("{name}: {bad:?}"));
        }
        let reparsed = Transcript::parse(&t.render()).map_err(|e| format!("{name}: {e}"))?;
        if !layering_violations(&reparsed).is_empty() {
            return Err(format!("{name}: violation after reparse"));
        }
        transcripts += 1;
        quotes += t.entries.iter().filter(|e| e.kind == MessageKind::QuoteL3).count();
    }
    Ok(format!("{transcripts} transcripts, {quotes} level-3 quotes"))
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6570);
    let mut granted_total = 0u64;
    for case in 0..1000 {
        let mut c = ScenarioConfig::new(Scenario::Prepaid);
        c.run.seed = rng.gen_range(0..=i64::MAX as u64);
        c.prepaid.initial_total = rng.gen_range(0..12);
        let n = rng.gen_range(0..7);
        c.prepaid.purchases = (0..n).map(|_| rng.gen_range(0..6)).collect();
        c.prepaid.drift_before = rng.gen_bool(0.25).then(|| rng.gen_range(0..=n));

        let p = match run(&c).outcome {
            Outcome::Prepaid(p) => p,
            o => return Err(format!("case {case}: {o:?}")),
        };
        let mut total = c.prepaid.initial_total;
        let mut drifted = false;
        for (i, &units) in c.prepaid.purchases.iter().enumerate() {
            drifted |= c.prepaid.drift_before == Some(i);
            let grant = !drifted && total > 0 && units <= total;
            let attempt = &p.attempts[i];
            if attempt.decision.is_grant() != grant {
                return Err(format!("case {case} attempt {i}: {} with total {total}, drifted {drifted}", attempt.decision.summary()));
            }
            if grant {
                total -= units;
                granted_total += units;
            }
            if attempt.total_after != Some(total) {
                return Err(format!("case {case} attempt {i}: sealed {:?}, expected {total}", attempt.total_after));
            }
        }
        let granted: u64 = p.attempts.iter().filter(|a| a.decision.is_grant()).map(|a| a.units).sum();
        if p.final_total != Some(c.prepaid.initial_total - granted) || p.final_total != Some(total) {
            return Err(format!("case {case}: final {:?}, expected {total}", p.final_total));
        }
    }
    Ok(format!("1000 sequences, {granted_total} units granted in all"))
}

fn criterion_7() -> Check {
    let mut checked = 0;
    for variant in SubordinationVariant::ALL {
        for requests in 1..=4 {
            for revoke in 0..requests {
                let mut c = ScenarioConfig::new(Scenario::Bonding);
                c.bonding.variant = variant;
                c.bonding.requests = requests;
                c.bonding.revoke_before = Some(revoke);
                let b = match run(&c).outcome {
                    Outcome::Bonding(b) => b,
                    o => return Err(format!("{o:?}")),
                };
                for (i, d) in b.decisions.iter().enumerate() {
                    let want = if i < revoke { "grant" } else { "deny(revoked)" };
                    if !d.summary().starts_with(want) {
                        return Err(format!("{variant} revoke before {revoke}: request {i} {}", d.summary()));
                    }
                }
                checked += b.decisions.len() - revoke;
            }
        }
    }
    Ok(format!("{checked} post-revocation requests denied"))
}

fn criterion_8() -> Check {
    let mut cases = corpus();
    let mut tampered = pos_config(PrivacyMode::Encrypted);
    tampered.adversary.script = vec!["tamper:WrappedAck:1:3".into(), "dup:AuthAck:0".into()];
    cases.push(("pos tampered".into(), tampered));
    for (name, cfg) in &cases {
        let render = || {
            let r = run(cfg);
            let t = r.world.fabric.transcript().render();
            (t, RunReport::new(&r, "out/run.transcript").render())
        };
        let (t1, r1) = render();
        let (t2, r2) = render();
        if t1 != t2 {
            return Err(format!("{name}: transcripts differ"));
        }
        if r1 != r2 {
            return Err(format!("{name}: reports differ"));
        }
    }
    let m1 = report::matrix(&ScenarioConfig::new(Scenario::Pos)).map_err(|e| e.to_string())?;
    let m2 = report::matrix(&ScenarioConfig::new(Scenario::Pos)).map_err(|e| e.to_string())?;
    if m1.render() != m2.render() {
        return Err("matrix output differs".into());
    }
    Ok(format!("{} configurations rerun byte-identically", cases.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("transposition transcript shape", criterion_1, Some(Duration::from_secs(1))),
        ("tamper completeness", criterion_2, Some(Duration::from_secs(10))),
        ("clone resilience", criterion_3, Some(Duration::from_secs(1))),
        ("privacy view", criterion_4, Some(Duration::from_secs(1))),
        ("assertion layering", criterion_5, None),
        ("prepaid conservation", criterion_6, Some(Duration::from_secs(5))),
        ("revocation", criterion_7, Some(Duration::from_secs(1))),
        ("determinism", criterion_8, None),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took longer than {l:?}")),
            (r, _) => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let limit = limit.map_or(String::new(), |l| format!(", limit {l:?}"));
        println!("{status} criterion {}: {name} ({:.3}s{limit}) {detail}", i + 1, elapsed.as_secs_f64());
        failed += usize::from(result.is_err());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
