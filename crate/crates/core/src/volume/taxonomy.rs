//! The twelve thalamic structures, their integer codes, and the nuclei groups
//! used for the hierarchical volumetric analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of thalamic structures (11 nuclei plus the mammillothalamic tract).
pub const NUM_STRUCTURES: usize = 12;

/// Number of classes predicted by the nuclei head: background plus structures.
pub const NUM_CLASSES: usize = NUM_STRUCTURES + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Anterior,
    Lateral,
    Posterior,
    Medial,
    Others,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Anterior,
        Group::Lateral,
        Group::Posterior,
        Group::Medial,
        Group::Others,
    ];

    /// The four nuclei groups tested in the diagnosis analysis. The
    /// mammillothalamic tract is a fibre bundle, not a nucleus, and sits alone
    /// in `Others`.
    pub const NUCLEI_GROUPS: [Group; 4] =
        [Group::Anterior, Group::Lateral, Group::Posterior, Group::Medial];

    pub fn name(self) -> &'static str {
        match self {
            Group::Anterior => "anterior",
            Group::Lateral => "lateral",
            Group::Posterior => "posterior",
            Group::Medial => "medial",
            Group::Others => "others",
        }
    }

    pub fn members(self) -> Vec<Structure> {
        Structure::ALL
            .iter()
            .copied()
            .filter(|s| s.group() == self)
            .collect()
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A labelled thalamic structure. Discriminants are the on-disk label codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Structure {
    AV = 1,
    VA = 2,
    VLa = 3,
    VLp = 4,
    VPl = 5,
    Pul = 6,
    LGN = 7,
    MGN = 8,
    CM = 9,
    MD = 10,
    Hb = 11,
    MTT = 12,
}

impl Structure {
    pub const ALL: [Structure; NUM_STRUCTURES] = [
        Structure::AV,
        Structure::VA,
        Structure::VLa,
        Structure::VLp,
        Structure::VPl,
        Structure::Pul,
        Structure::LGN,
        Structure::MGN,
        Structure::CM,
        Structure::MD,
        Structure::Hb,
        Structure::MTT,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Structure> {
        match code {
            1..=12 => Ok(Structure::ALL[code as usize - 1]),
            _ => Err(Error::UnknownCode(code as i64)),
        }
    }

    pub fn from_abbrev(abbrev: &str) -> Result<Structure> {
        Structure::ALL
            .iter()
            .copied()
            .find(|s| s.abbrev().eq_ignore_ascii_case(abbrev))
            .ok_or_else(|| Error::Stats(format!("unknown structure abbreviation `{abbrev}`")))
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Structure::AV => "AV",
            Structure::VA => "VA",
            Structure::VLa => "VLa",
            Structure::VLp => "VLp",
            Structure::VPl => "VPl",
            Structure::Pul => "Pul",
            Structure::LGN => "LGN",
            Structure::MGN => "MGN",
            Structure::CM => "CM",
            Structure::MD => "MD",
            Structure::Hb => "Hb",
            Structure::MTT => "MTT",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::AV => "Anterior ventral nucleus",
            Structure::VA => "Ventral anterior nucleus",
            Structure::VLa => "Ventral lateral anterior nucleus",
            Structure::VLp => "Ventral lateral posterior nucleus",
            Structure::VPl => "Ventral posterior lateral nucleus",
            Structure::Pul => "Pulvinar nucleus",
            Structure::LGN => "Lateral geniculate nucleus",
            Structure::MGN => "Medial geniculate nucleus",
            Structure::CM => "Centromedian nucleus",
            Structure::MD => "Mediodorsal nucleus",
            Structure::Hb => "Habenular nucleus",
            Structure::MTT => "Mammillothalamic tract",
        }
    }

    pub fn group(self) -> Group {
        match self {
            Structure::AV => Group::Anterior,
            Structure::VLp | Structure::VLa | Structure::VA | Structure::VPl => Group::Lateral,
            Structure::Pul | Structure::MGN | Structure::LGN => Group::Posterior,
            Structure::MD | Structure::CM | Structure::Hb => Group::Medial,
            Structure::MTT => Group::Others,
        }
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.abbrev())
    }
}

/// Group of a label code. Background (0) has no group.
pub fn group_of(code: u8) -> Result<Group> {
    Structure::from_code(code).map(Structure::group)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub code: u8,
    pub abbrev: String,
    pub name: String,
    pub group: Group,
}

/// Sidecar describing the label coding of every label map this crate writes.
pub fn taxonomy_entries() -> Vec<TaxonomyEntry> {
    Structure::ALL
        .iter()
        .map(|s| TaxonomyEntry {
            code: s.code(),
            abbrev: s.abbrev().to_string(),
            name: s.name().to_string(),
            group: s.group(),
        })
        .collect()
}

pub fn taxonomy_json() -> String {
    serde_json::to_string_pretty(&taxonomy_entries()).expect("taxonomy serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_membership() {
        assert_eq!(group_of(Structure::AV.code()).unwrap(), Group::Anterior);
        assert_eq!(group_of(Structure::VPl.code()).unwrap(), Group::Lateral);
        assert_eq!(group_of(Structure::Hb.code()).unwrap(), Group::Medial);
        assert_eq!(Group::Anterior.members(), vec![Structure::AV]);
        assert_eq!(
            Group::Lateral.members(),
            vec![Structure::VA, Structure::VLa, Structure::VLp, Structure::VPl]
        );
        assert_eq!(
            Group::Posterior.members(),
            vec![Structure::Pul, Structure::LGN, Structure::MGN]
        );
        assert_eq!(
            Group::Medial.members(),
            vec![Structure::CM, Structure::MD, Structure::Hb]
        );
        assert_eq!(Group::Others.members(), vec![Structure::MTT]);
    }

    #[test]
    fn groups_partition_the_structures() {
        let total: usize = Group::ALL.iter().map(|g| g.members().len()).sum();
        assert_eq!(total, NUM_STRUCTURES);
        for s in Structure::ALL {
            let owners = Group::ALL.iter().filter(|g| g.members().contains(&s)).count();
            assert_eq!(owners, 1, "{s} must belong to exactly one group");
        }
    }

    #[test]
    fn codes_are_a_bijection() {
        for (i, s) in Structure::ALL.iter().enumerate() {
            assert_eq!(s.code() as usize, i + 1);
            assert_eq!(Structure::from_code(s.code()).unwrap(), *s);
            assert_eq!(Structure::from_abbrev(s.abbrev()).unwrap(), *s);
        }
        assert!(group_of(0).is_err());
        assert!(group_of(13).is_err());
    }

    #[test]
    fn sidecar_lists_all_codes() {
        let v: serde_json::Value = serde_json::from_str(&taxonomy_json()).unwrap();
        let arr = v.as_array().unwrap();
        assert_eq!(arr.len(), 12);
        assert_eq!(arr[3]["abbrev"], "VLp");
        assert_eq!(arr[3]["group"], "lateral");
    }
}
