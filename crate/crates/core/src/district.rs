//! District name dictionary.
//!
//! Remote-sensing boundaries and the two official statistics sources spell district
//! names differently, use pre-reorganisation names, or abbreviate them. Every name that
//! enters the pipeline is resolved to one of the 33 canonical Telangana districts.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUILTIN_TABLE: &str = include_str!("../data/districts.tsv");

#[derive(Debug, Clone)]
pub struct DistrictDictionary {
    aliases: HashMap<String, String>,
    canonical: BTreeSet<String>,
}

fn match_key(raw: &str) -> String {
    raw.chars()
        .map(|c| match c {
            '-' | '_' | '.' | '\t' => ' ',
            c => c.to_ascii_lowercase(),
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl DistrictDictionary {
    /// Parses the two-column `alias<TAB>canonical` table.
    pub fn parse(text: &str) -> Result<Self> {
        let mut aliases = HashMap::new();
        let mut canonical = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(alias), Some(canon), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::InvalidParameter(format!(
                    "district table line {}: expected two tab-separated columns",
                    lineno + 1
                )));
            };
            let canon = canon.trim().to_string();
            if canon.is_empty() || alias.trim().is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "district table line {}: empty column",
                    lineno + 1
                )));
            }
            canonical.insert(canon.clone());
            for name in [alias, canon.as_str()] {
                let key = match_key(name);
                if let Some(prev) = aliases.get(&key) {
                    if *prev != canon {
                        return Err(Error::InvalidParameter(format!(
                            "district table line {}: '{name}' maps to both '{prev}' and '{canon}'",
                            lineno + 1
                        )));
                    }
                }
                aliases.insert(key, canon.clone());
            }
        }
        Ok(DistrictDictionary { aliases, canonical })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The table shipped with the crate.
    pub fn builtin() -> &'static DistrictDictionary {
        static DICT: OnceLock<DistrictDictionary> = OnceLock::new();
        DICT.get_or_init(|| DistrictDictionary::parse(BUILTIN_TABLE).expect("builtin district table is valid"))
    }

    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.canonical.iter().map(String::as_str)
    }

    /// Resolves a raw name to its canonical form.
    ///
    /// Falls back to a unique leading-word match ("Medchal" -> "Medchal Malkajgiri")
    /// when the table has no explicit entry. Never passes an unknown name through.
    pub fn normalize(&self, raw: &str) -> Result<String> {
        let key = match_key(raw);
        if key.is_empty() {
            return Err(Error::UnknownDistrict(raw.to_string()));
        }
        if let Some(c) = self.aliases.get(&key) {
            return Ok(c.clone());
        }
        let words: Vec<&str> = key.split(' ').collect();
        let mut hits = self.canonical.iter().filter(|c| {
            let ck = match_key(c);
            let cw: Vec<&str> = ck.split(' ').collect();
            cw.len() > words.len() && cw[..words.len()] == words[..]
        });
        match (hits.next(), hits.next()) {
            (Some(c), None) => Ok(c.clone()),
            _ => Err(Error::UnknownDistrict(raw.to_string())),
        }
    }
}

/// Resolves a district name against the built-in dictionary.
pub fn normalize_district_name(raw: &str) -> Result<String> {
    DistrictDictionary::builtin().normalize(raw)
}
