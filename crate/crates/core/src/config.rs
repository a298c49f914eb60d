//! Scenario configuration: TOML sections, strict keys, dotted overrides.
//!
//! ```toml
//! [run]
//! scenario = "pos"
//! seed = 42
//!
//! [adversary]
//! script = ["tamper:WrappedTau:0"]
//!
//! [pos]
//! privacy = "mac_only"
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credentials::EnrolmentMode;
use crate::fabric::AdversaryRule;
use crate::operations::{PrivacyMode, RestrictionVariant, SecondaryAuth, StepOrder, SubordinationVariant};

pub const DEFAULT_SEED: u64 = 42;

/// Prefix of the transcript header lines that carry the effective config.
pub const HEADER_PREFIX: &str = "cfg.";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Prepaid,
    Bonding,
    Pos,
    Restriction,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Prepaid, Scenario::Bonding, Scenario::Pos, Scenario::Restriction];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Prepaid => "prepaid",
            Scenario::Bonding => "bonding",
            Scenario::Pos => "pos",
            Scenario::Restriction => "restriction",
        }
    }

    /// Key that `--variant` sets for this scenario.
    pub fn variant_key(self) -> &'static str {
        match self {
            Scenario::Prepaid => "prepaid.variant",
            Scenario::Bonding => "bonding.variant",
            Scenario::Pos => "pos.privacy",
            Scenario::Restriction => "restriction.variant",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s} (expected prepaid, bonding, pos or restriction)"))
    }
}

macro_rules! string_serde {
    ($($t:ty),* $(,)?) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(de::Error::custom)
            }
        }
    )*};
}

string_serde!(
    Scenario,
    RestrictionVariant,
    EnrolmentMode,
    SubordinationVariant,
    PrivacyMode,
    StepOrder,
    SecondaryAuth,
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub scenario: Scenario,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fabric deliveries allowed per protocol run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_budget: Option<usize>,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySection {
    pub script: Vec<String>,
}

/// One adversary script entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptEntry {
    Rule(AdversaryRule),
    /// `clone_credential:<victim>`: copy the victim's γ onto the configured attacker.
    Clone { victim: String },
}

impl FromStr for ScriptEntry {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(victim) = s.strip_prefix("clone_credential:") {
            if victim.is_empty() {
                return Err(format!("bad adversary rule `{s}`: missing victim"));
            }
            return Ok(ScriptEntry::Clone {
                victim: victim.to_string(),
            });
        }
        s.parse().map(ScriptEntry::Rule).map_err(|e| format!("{e}"))
    }
}

impl AdversarySection {
    pub fn entries(&self) -> Result<Vec<ScriptEntry>, ConfigError> {
        self.script
            .iter()
            .map(|s| s.parse().map_err(|e| invalid("adversary.script", e)))
            .collect()
    }

    pub fn rules(&self) -> Result<Vec<AdversaryRule>, ConfigError> {
        Ok(self
            .entries()?
            .into_iter()
            .filter_map(|e| match e {
                ScriptEntry::Rule(r) => Some(r),
                ScriptEntry::Clone { .. } => None,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepaidSection {
    pub mno: String,
    pub phone: String,
    pub variant: RestrictionVariant,
    pub initial_total: u64,
    /// Sealed-storage slot of the running total.
    pub slot: u32,
    /// Units of each purchase attempt, in order.
    pub purchases: Vec<u64>,
    /// Index of the attempt before which the phone's software is modified.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_before: Option<usize>,
}

impl Default for PrepaidSection {
    fn default() -> Self {
        PrepaidSection {
            mno: "mno-a".into(),
            phone: "phone-a".into(),
            variant: RestrictionVariant::Acl,
            initial_total: 5,
            slot: 7,
            purchases: vec![1],
            drift_before: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BondingSection {
    /// The bonding principal: issues the accessory's σ.
    pub mno: String,
    pub phone: String,
    /// Principal the phone belongs to; defaults to `mno`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phone_domain: Option<String>,
    pub camera: String,
    /// Services listed in the accessory's σ.
    pub services: Vec<String>,
    /// Service requested on every attempt.
    pub service: String,
    pub variant: SubordinationVariant,
    pub requests: usize,
    /// Revoke the accessory's backing key before this request index.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub revoke_before: Option<usize>,
    pub slot: u32,
}

impl Default for BondingSection {
    fn default() -> Self {
        BondingSection {
            mno: "mno-a".into(),
            phone: "phone-a".into(),
            phone_domain: None,
            camera: "camera-a".into(),
            services: vec!["photo_upload".into()],
            service: "photo_upload".into(),
            variant: SubordinationVariant::Forward,
            requests: 1,
            revoke_before: None,
            slot: 4,
        }
    }
}

impl BondingSection {
    pub fn phone_domain(&self) -> &str {
        self.phone_domain.as_deref().unwrap_or(&self.mno)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosSection {
    pub mno: String,
    pub phone: String,
    pub owner: String,
    pub pos: String,
    pub privacy: PrivacyMode,
    pub step_order: StepOrder,
    pub secondary_auth: SecondaryAuth,
    pub item_price: u64,
}

impl Default for PosSection {
    fn default() -> Self {
        PosSection {
            mno: "mno-a".into(),
            phone: "phone-a".into(),
            owner: "owner-b".into(),
            pos: "pos-b".into(),
            privacy: PrivacyMode::Encrypted,
            step_order: StepOrder::AThenB,
            secondary_auth: SecondaryAuth::SessionEvidence,
            item_price: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestrictionSection {
    pub principal: String,
    pub agent: String,
    pub variant: RestrictionVariant,
    pub enrolment: EnrolmentMode,
    pub present_tau: bool,
    /// A second device of the same domain, target of clone scripts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacker: Option<String>,
    pub attacker_first: bool,
}

impl Default for RestrictionSection {
    fn default() -> Self {
        RestrictionSection {
            principal: "mno-a".into(),
            agent: "phone-a".into(),
            variant: RestrictionVariant::Acl,
            enrolment: EnrolmentMode::PrincipalControlled,
            present_tau: true,
            attacker: None,
            attacker_first: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub run: RunSection,
    #[serde(default)]
    pub adversary: AdversarySection,
    #[serde(default)]
    pub prepaid: PrepaidSection,
    #[serde(default)]
    pub bonding: BondingSection,
    #[serde(default)]
    pub pos: PosSection,
    #[serde(default)]
    pub restriction: RestrictionSection,
}

/// Set a dotted key in a TOML table. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn set_key(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| ConfigError::Override(key.to_string()))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

fn split_override(s: &str) -> Result<(&str, &str), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(s.to_string()))
}

impl ScenarioConfig {
    /// Defaults for `scenario`, as if the file held only `[run]`.
    pub fn new(scenario: Scenario) -> Self {
        ScenarioConfig {
            run: RunSection {
                scenario,
                seed: DEFAULT_SEED,
                step_budget: None,
            },
            adversary: AdversarySection::default(),
            prepaid: PrepaidSection::default(),
            bonding: BondingSection::default(),
            pos: PosSection::default(),
            restriction: RestrictionSection::default(),
        }
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let cfg = if overrides.is_empty() {
            toml::from_str::<ScenarioConfig>(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            for o in overrides {
                let (k, v) = split_override(o)?;
                set_key(&mut table, k, v)?;
            }
            table
                .try_into::<ScenarioConfig>()
                .map_err(|e| ConfigError::Parse(format!("after overrides: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, overrides).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Apply further `key=value` overrides to an already loaded config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = toml::to_string(self).expect("config serializes");
        Self::parse(&text, overrides)
    }

    pub fn scenario(&self) -> Scenario {
        self.run.scenario
    }

    /// Actor names of the active scenario, principals first.
    pub fn roles(&self) -> (Vec<&str>, Vec<&str>) {
        match self.run.scenario {
            Scenario::Prepaid => (vec![&self.prepaid.mno], vec![&self.prepaid.phone]),
            Scenario::Bonding => {
                let b = &self.bonding;
                let mut p = vec![b.mno.as_str()];
                if b.phone_domain() != b.mno {
                    p.push(b.phone_domain());
                }
                (p, vec![&b.phone, &b.camera])
            }
            Scenario::Pos => (vec![&self.pos.mno, &self.pos.owner], vec![&self.pos.phone, &self.pos.pos]),
            Scenario::Restriction => {
                let r = &self.restriction;
                let mut a = vec![r.agent.as_str()];
                a.extend(r.attacker.as_deref());
                (vec![&r.principal], a)
            }
        }
    }

    /// `variant` field of the outcome record.
    pub fn variant_summary(&self) -> String {
        match self.run.scenario {
            Scenario::Prepaid => format!("variant={}", self.prepaid.variant),
            Scenario::Bonding => format!("variant={}", self.bonding.variant),
            Scenario::Pos => format!(
                "privacy={} order={} secondary={}",
                self.pos.privacy, self.pos.step_order, self.pos.secondary_auth
            ),
            Scenario::Restriction => format!(
                "variant={} enrolment={}",
                self.restriction.variant, self.restriction.enrolment
            ),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let section = self.run.scenario.as_str();
        if self.run.step_budget == Some(0) {
            return Err(invalid("run.step_budget", "must be positive"));
        }
        // TOML integers are signed; larger values could not be replayed
        let too_big = |v: u64| v > i64::MAX as u64;
        let p = &self.prepaid;
        for (key, v) in [
            ("run.seed", self.run.seed),
            ("prepaid.initial_total", p.initial_total),
            ("pos.item_price", self.pos.item_price),
        ]
        .into_iter()
        .chain(p.purchases.iter().map(|&u| ("prepaid.purchases", u)))
        {
            if too_big(v) {
                return Err(invalid(key, format!("{v} exceeds {}", i64::MAX)));
            }
        }
        let (principals, agents) = self.roles();
        let mut seen = std::collections::BTreeSet::new();
        for name in principals.iter().chain(&agents) {
            if name.is_empty() {
                return Err(invalid(section, "actor names must be non-empty"));
            }
            if !seen.insert(*name) {
                return Err(invalid(section, format!("actor name `{name}` used twice")));
            }
        }
        for entry in self.adversary.entries()? {
            if let ScriptEntry::Clone { victim } = entry {
                let r = &self.restriction;
                if self.run.scenario != Scenario::Restriction || r.attacker.is_none() {
                    return Err(invalid(
                        "adversary.script",
                        "clone_credential needs the restriction scenario with an attacker",
                    ));
                }
                if !agents.contains(&victim.as_str()) {
                    return Err(invalid("adversary.script", format!("unknown clone victim `{victim}`")));
                }
            }
        }
        match self.run.scenario {
            Scenario::Prepaid => {
                if let Some(i) = self.prepaid.drift_before {
                    if i > self.prepaid.purchases.len() {
                        return Err(invalid("prepaid.drift_before", "past the last purchase"));
                    }
                }
            }
            Scenario::Bonding => {
                let b = &self.bonding;
                if b.requests == 0 {
                    return Err(invalid("bonding.requests", "must be positive"));
                }
                if b.revoke_before.is_some_and(|i| i >= b.requests) {
                    return Err(invalid("bonding.revoke_before", "must name a request index"));
                }
            }
            Scenario::Pos | Scenario::Restriction => {}
        }
        Ok(())
    }

    /// `cfg.<key>` header entries for the run section, the adversary script
    /// and the active scenario's section.
    pub fn to_header(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        let mut out = Vec::new();
        for section in ["run", "adversary", self.run.scenario.as_str()] {
            if let Some(toml::Value::Table(t)) = table.get(section) {
                for (k, v) in t {
                    out.push((format!("{HEADER_PREFIX}{section}.{k}"), v.to_string()));
                }
            }
        }
        out
    }

    /// Rebuild a config from transcript header entries.
    pub fn from_header(header: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table = toml::Table::new();
        let mut any = false;
        for (k, v) in header {
            if let Some(key) = k.strip_prefix(HEADER_PREFIX) {
                set_key(&mut table, key, v)?;
                any = true;
            }
        }
        if !any {
            return Err(invalid("header", "transcript carries no configuration"));
        }
        let cfg = table
            .try_into::<ScenarioConfig>()
            .map_err(|e| ConfigError::Parse(format!("transcript header: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
