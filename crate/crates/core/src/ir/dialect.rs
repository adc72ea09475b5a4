use std::fmt;

use serde::{Deserialize, Serialize};

use super::BinOp;

/// Registers per dialect. The last one is the stack pointer.
pub const NUM_REGISTERS: u8 = 16;
pub const SP_INDEX: u8 = NUM_REGISTERS - 1;

/// Surface keywords of one dialect.
#[derive(Debug)]
pub struct KeywordTable {
    pub load: &'static str,
    pub store: &'static str,
    pub jmp: &'static str,
    pub call: &'static str,
    pub ret: &'static str,
    pub nop: &'static str,
    /// Indexed by `BinOp as usize`.
    pub ops: [&'static str; 8],
}

impl KeywordTable {
    pub fn op(&self, op: BinOp) -> &'static str {
        self.ops[op as usize]
    }

    pub fn op_from(&self, s: &str) -> Option<BinOp> {
        self.ops
            .iter()
            .position(|k| *k == s)
            .map(|i| BinOp::ALL[i])
    }

    /// Every keyword of the table, in a fixed order.
    pub fn all(&self) -> impl Iterator<Item = &'static str> + '_ {
        [self.load, self.store, self.jmp, self.call, self.ret, self.nop]
            .into_iter()
            .chain(self.ops.iter().copied())
    }
}

const ARCH_A: KeywordTable = KeywordTable {
    load: "load",
    store: "store",
    jmp: "jmp",
    call: "call",
    ret: "ret",
    nop: "nop",
    ops: ["+", "-", "*", "&", "|", "^", "<<", ">>"],
};

const ARCH_B: KeywordTable = KeywordTable {
    load: "fetch",
    store: "put",
    jmp: "goto",
    call: "invoke",
    ret: "leave",
    nop: "skip",
    ops: ["plus", "minus", "times", "and", "or", "xor", "shl", "shr"],
};

/// A synthetic architecture: same semantics, disjoint register names and keywords.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    #[serde(rename = "archA")]
    ArchA,
    #[serde(rename = "archB")]
    ArchB,
}

impl Dialect {
    pub const ALL: [Dialect; 2] = [Dialect::ArchA, Dialect::ArchB];

    pub fn tag(self) -> &'static str {
        match self {
            Dialect::ArchA => "archA",
            Dialect::ArchB => "archB",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Dialect> {
        Dialect::ALL.into_iter().find(|d| d.tag() == tag)
    }

    /// Dense id used for the architecture embedding.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn register_prefix(self) -> char {
        match self {
            Dialect::ArchA => 'r',
            Dialect::ArchB => 's',
        }
    }

    pub fn keywords(self) -> &'static KeywordTable {
        match self {
            Dialect::ArchA => &ARCH_A,
            Dialect::ArchB => &ARCH_B,
        }
    }

    pub fn other(self) -> Dialect {
        match self {
            Dialect::ArchA => Dialect::ArchB,
            Dialect::ArchB => Dialect::ArchA,
        }
    }

    /// Parses a register name of this dialect (`r0`..`r15` / `s0`..`s15`).
    pub fn register(self, name: &str) -> Option<Register> {
        let rest = name.strip_prefix(self.register_prefix())?;
        if rest.is_empty() || (rest.len() > 1 && rest.starts_with('0')) {
            return None;
        }
        let index: u8 = rest.parse().ok()?;
        (index < NUM_REGISTERS).then_some(Register {
            dialect: self,
            index,
        })
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Register {
    pub dialect: Dialect,
    pub index: u8,
}

impl Register {
    pub fn new(dialect: Dialect, index: u8) -> Register {
        assert!(index < NUM_REGISTERS, "register index {index} out of range");
        Register { dialect, index }
    }

    pub fn sp(dialect: Dialect) -> Register {
        Register::new(dialect, SP_INDEX)
    }

    pub fn is_sp(self) -> bool {
        self.index == SP_INDEX
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.dialect.register_prefix(), self.index)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn keyword_tables_are_injective_and_disjoint() {
        let a: Vec<_> = Dialect::ArchA.keywords().all().collect();
        let b: Vec<_> = Dialect::ArchB.keywords().all().collect();
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), a.len());
        assert_eq!(b.iter().collect::<HashSet<_>>().len(), b.len());
        assert!(a.iter().all(|k| !b.contains(k)));
    }

    #[test]
    fn register_names() {
        assert_eq!(Dialect::ArchA.register("r15"), Some(Register::sp(Dialect::ArchA)));
        assert_eq!(Dialect::ArchB.register("s3").unwrap().to_string(), "s3");
        assert_eq!(Dialect::ArchA.register("s3"), None);
        assert_eq!(Dialect::ArchA.register("r16"), None);
        assert_eq!(Dialect::ArchA.register("r01"), None);
        assert_eq!(Dialect::ArchA.register("r"), None);
    }

    #[test]
    fn tags_round_trip() {
        for d in Dialect::ALL {
            assert_eq!(Dialect::from_tag(d.tag()), Some(d));
        }
        assert_eq!(Dialect::from_tag("x86"), None);
    }
}
