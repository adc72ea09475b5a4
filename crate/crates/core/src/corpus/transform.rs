//! Semantics-preserving rewrites standing in for cross-architecture,
//! cross-optimization and obfuscation variants.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lift::{lift, lower, next_label, references, Item, ItemKind};
use crate::ir::{BinOp, Expr, Instruction, IrFunction, Operand, Register, NUM_REGISTERS, SP_INDEX};
use crate::microtrace::{init_state, run_from, Termination, TracerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    DialectTranslate,
    RegisterRename,
    InstructionSubstitute,
    BogusFlowInsert,
    BlockSplit,
    StrengthReduce,
}

impl PassKind {
    pub const ALL: [PassKind; 6] = [
        PassKind::DialectTranslate,
        PassKind::RegisterRename,
        PassKind::InstructionSubstitute,
        PassKind::BogusFlowInsert,
        PassKind::BlockSplit,
        PassKind::StrengthReduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PassKind::DialectTranslate => "dialect_translate",
            PassKind::RegisterRename => "register_rename",
            PassKind::InstructionSubstitute => "instruction_substitute",
            PassKind::BogusFlowInsert => "bogus_flow_insert",
            PassKind::BlockSplit => "block_split",
            PassKind::StrengthReduce => "strength_reduce",
        }
    }

    pub fn from_name(s: &str) -> Option<PassKind> {
        PassKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TransformPass {
    pub kind: PassKind,
    pub seed: u64,
}

impl TransformPass {
    pub fn new(kind: PassKind, seed: u64) -> Self {
        TransformPass { kind, seed }
    }
}

impl fmt::Display for TransformPass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.seed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad pass spec {0:?}, expected <name>:<seed>")]
pub struct PassSpecError(pub String);

impl FromStr for TransformPass {
    type Err = PassSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PassSpecError(s.to_string());
        let (name, seed) = s.split_once(':').ok_or_else(err)?;
        Ok(TransformPass {
            kind: PassKind::from_name(name).ok_or_else(err)?,
            seed: seed.parse().map_err(|_| err())?,
        })
    }
}

/// Where each original register index lives after a transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegisterMap(pub [u8; NUM_REGISTERS as usize]);

impl RegisterMap {
    pub fn identity() -> Self {
        let mut m = [0u8; NUM_REGISTERS as usize];
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = i as u8;
        }
        RegisterMap(m)
    }

    pub fn get(&self, index: u8) -> u8 {
        self.0[index as usize]
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RegisterMap) -> RegisterMap {
        let mut m = [0u8; NUM_REGISTERS as usize];
        for (i, slot) in m.iter_mut().enumerate() {
            *slot = next.get(self.0[i]);
        }
        RegisterMap(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub function: IrFunction,
    /// False when the pass found nothing to rewrite; `function` is then the input.
    pub applied: bool,
    pub mapping: RegisterMap,
}

pub fn apply_transform(f: &IrFunction, pass: &TransformPass) -> Transformed {
    let mut rng = ChaCha8Rng::seed_from_u64(pass.seed);
    let unchanged = || Transformed {
        function: f.clone(),
        applied: false,
        mapping: RegisterMap::identity(),
    };
    let rebuilt = |items: &[Item]| IrFunction::new(f.id.clone(), f.dialect, lower(items));
    match pass.kind {
        PassKind::DialectTranslate => {
            let to = f.dialect.other();
            let instructions = f
                .instructions
                .iter()
                .map(|i| i.map_registers(|r| Register::new(to, r.index)))
                .collect();
            Transformed {
                function: IrFunction::new(f.id.clone(), to, instructions),
                applied: true,
                mapping: RegisterMap::identity(),
            }
        }
        PassKind::RegisterRename => {
            let used = f
                .instructions
                .iter()
                .flat_map(|i| i.registers())
                .any(|r| !r.is_sp());
            if !used {
                return unchanged();
            }
            let mut perm: Vec<u8> = (0..SP_INDEX).collect();
            perm.shuffle(&mut rng);
            let mut mapping = RegisterMap::identity();
            for (i, p) in perm.iter().enumerate() {
                mapping.0[i] = *p;
            }
            let instructions = f
                .instructions
                .iter()
                .map(|i| i.map_registers(|r| Register::new(r.dialect, mapping.get(r.index))))
                .collect();
            Transformed {
                function: IrFunction::new(f.id.clone(), f.dialect, instructions),
                applied: mapping != RegisterMap::identity(),
                mapping,
            }
        }
        PassKind::InstructionSubstitute => {
            let mut applied = false;
            let instructions = f
                .instructions
                .iter()
                .map(|i| match substitute(i, &mut rng) {
                    Some(n) => {
                        applied = true;
                        n
                    }
                    None => i.clone(),
                })
                .collect();
            if !applied {
                return unchanged();
            }
            Transformed {
                function: IrFunction::new(f.id.clone(), f.dialect, instructions),
                applied,
                mapping: RegisterMap::identity(),
            }
        }
        PassKind::BogusFlowInsert => {
            let mut items = lift(f);
            let dead = next_label(&items);
            let p = rng.random_range(0..items.len());
            let resume = items[p].label.expect("lifted items are labelled");
            items.insert(
                p,
                Item::unlabelled(ItemKind::Jump {
                    cond: Expr::Const(0),
                    target: dead,
                }),
            );
            items.push(Item::unlabelled(ItemKind::Instr(Instruction::Ret)));
            let regs: Vec<Register> = (0..SP_INDEX).map(|i| Register::new(f.dialect, i)).collect();
            for k in 0..rng.random_range(2..=4) {
                let dst = *regs.choose(&mut rng).unwrap();
                let lhs = *regs.choose(&mut rng).unwrap();
                let op = BinOp::ALL[rng.random_range(0..BinOp::ALL.len())];
                let rhs = Operand::Const(rng.random_range(1..256));
                let kind = ItemKind::Instr(Instruction::Assign {
                    dst,
                    src: Expr::BinOp { op, lhs, rhs },
                });
                items.push(if k == 0 {
                    Item {
                        label: Some(dead),
                        kind,
                    }
                } else {
                    Item::unlabelled(kind)
                });
            }
            items.push(Item::unlabelled(ItemKind::Jump {
                cond: Expr::Const(1),
                target: resume,
            }));
            Transformed {
                function: rebuilt(&items),
                applied: true,
                mapping: RegisterMap::identity(),
            }
        }
        PassKind::BlockSplit => {
            let mut items = lift(f);
            if items.len() < 2 {
                return unchanged();
            }
            let mut cuts: Vec<usize> = (1..items.len()).collect();
            cuts.shuffle(&mut rng);
            let n = rng.random_range(1..=2).min(cuts.len());
            let mut cuts = cuts[..n].to_vec();
            cuts.sort_unstable_by(|a, b| b.cmp(a));
            for c in cuts {
                let next = items[c].label.expect("lifted items are labelled");
                items.insert(
                    c,
                    Item::unlabelled(ItemKind::Jump {
                        cond: Expr::Const(1),
                        target: next,
                    }),
                );
            }
            Transformed {
                function: rebuilt(&items),
                applied: true,
                mapping: RegisterMap::identity(),
            }
        }
        PassKind::StrengthReduce => {
            let mut items = lift(f);
            let mut applied = false;
            for it in items.iter_mut() {
                if let ItemKind::Instr(i) = &it.kind {
                    if let Some(n) = reduce(i) {
                        it.kind = ItemKind::Instr(n);
                        applied = true;
                    }
                }
            }
            let mut k = 0;
            while k + 1 < items.len() {
                if let Some(folded) = fold_pair(&items[k], &items[k + 1]) {
                    let second = items[k + 1].label;
                    if second.is_none_or(|l| references(&items, l) == 0) {
                        items[k].kind = ItemKind::Instr(folded);
                        items.remove(k + 1);
                        applied = true;
                        continue;
                    }
                }
                k += 1;
            }
            if !applied {
                return unchanged();
            }
            Transformed {
                function: rebuilt(&items),
                applied,
                mapping: RegisterMap::identity(),
            }
        }
    }
}

/// Rewrite table for instruction substitution.
fn substitute(i: &Instruction, rng: &mut ChaCha8Rng) -> Option<Instruction> {
    let Instruction::Assign { dst, src } = *i else {
        return None;
    };
    let src = match src {
        // a + c  ->  a - (-c)
        Expr::BinOp {
            op: BinOp::Add,
            lhs,
            rhs: Operand::Const(c),
        } => Expr::BinOp {
            op: BinOp::Sub,
            lhs,
            rhs: Operand::Const(c.wrapping_neg()),
        },
        // a - c  ->  a + (-c)
        Expr::BinOp {
            op: BinOp::Sub,
            lhs,
            rhs: Operand::Const(c),
        } => Expr::BinOp {
            op: BinOp::Add,
            lhs,
            rhs: Operand::Const(c.wrapping_neg()),
        },
        // d := 0  ->  d := d ^ d  |  d := d - d
        Expr::Const(0) => Expr::BinOp {
            op: if rng.random_bool(0.5) { BinOp::Xor } else { BinOp::Sub },
            lhs: dst,
            rhs: Operand::Reg(dst),
        },
        // d := a  ->  d := a | a
        Expr::Reg(a) => Expr::BinOp {
            op: BinOp::Or,
            lhs: a,
            rhs: Operand::Reg(a),
        },
        // a ^ a  ->  0
        Expr::BinOp {
            op: BinOp::Xor,
            lhs,
            rhs: Operand::Reg(r),
        } if lhs == r => Expr::Const(0),
        _ => return None,
    };
    Some(Instruction::Assign { dst, src })
}

fn reduce(i: &Instruction) -> Option<Instruction> {
    let Instruction::Assign { dst, src } = *i else {
        return None;
    };
    let src = match src {
        Expr::BinOp {
            op: BinOp::Mul,
            lhs,
            rhs: Operand::Const(c),
        } if c.is_power_of_two() => match c.trailing_zeros() {
            0 => Expr::Reg(lhs),
            1 => Expr::BinOp {
                op: BinOp::Add,
                lhs,
                rhs: Operand::Reg(lhs),
            },
            k => Expr::BinOp {
                op: BinOp::Shl,
                lhs,
                rhs: Operand::Const(u64::from(k)),
            },
        },
        Expr::BinOp {
            op: BinOp::Add,
            lhs,
            rhs: Operand::Reg(r),
        } if lhs == r => Expr::BinOp {
            op: BinOp::Shl,
            lhs,
            rhs: Operand::Const(1),
        },
        _ => return None,
    };
    Some(Instruction::Assign { dst, src })
}

/// `d := c1; d := d op c2`  ->  `d := (c1 op c2)`.
fn fold_pair(first: &Item, second: &Item) -> Option<Instruction> {
    let (
        ItemKind::Instr(Instruction::Assign {
            dst: d1,
            src: Expr::Const(c1),
        }),
        ItemKind::Instr(Instruction::Assign {
            dst: d2,
            src:
                Expr::BinOp {
                    op,
                    lhs,
                    rhs: Operand::Const(c2),
                },
        }),
    ) = (&first.kind, &second.kind)
    else {
        return None;
    };
    (d1 == d2 && lhs == d1).then(|| Instruction::Assign {
        dst: *d1,
        src: Expr::Const(op.apply(*c1, *c2)),
    })
}

/// Applies passes left to right, composing register mappings.
pub fn apply_pipeline(f: &IrFunction, passes: &[TransformPass]) -> Transformed {
    let mut cur = Transformed {
        function: f.clone(),
        applied: false,
        mapping: RegisterMap::identity(),
    };
    for p in passes {
        let next = apply_transform(&cur.function, p);
        cur = Transformed {
            function: next.function,
            applied: cur.applied || next.applied,
            mapping: cur.mapping.then(&next.mapping),
        };
    }
    cur
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EquivalenceFailure {
    #[error("seed {seed}: a run exhausted its step budget")]
    NoTermination { seed: u64 },
    #[error("seed {seed}: register {index} differs ({original:#x} vs {transformed:#x})")]
    Register {
        seed: u64,
        index: u8,
        original: u64,
        transformed: u64,
    },
    #[error("seed {seed}: memory contents differ")]
    Memory { seed: u64 },
}

/// Differential micro-execution: runs both functions from the same initial
/// state (registers permuted by `t.mapping`) and compares end states.
pub fn check_equivalence(
    original: &IrFunction,
    t: &Transformed,
    seeds: &[u64],
    cfg: &TracerConfig,
) -> Result<(), EquivalenceFailure> {
    for &seed in seeds {
        let s0 = init_state(original, seed, cfg);
        let mut s1 = init_state(&t.function, seed, cfg);
        for i in 0..NUM_REGISTERS {
            s1.registers[t.mapping.get(i) as usize] = s0.registers[i as usize];
        }
        let a = run_from(original, s0, cfg);
        let b = run_from(&t.function, s1, cfg);
        if a.trace.terminated_by == Termination::BudgetExhausted
            || b.trace.terminated_by == Termination::BudgetExhausted
        {
            return Err(EquivalenceFailure::NoTermination { seed });
        }
        for i in 0..NUM_REGISTERS {
            let (x, y) = (
                a.state.registers[i as usize],
                b.state.registers[t.mapping.get(i) as usize],
            );
            if x != y {
                return Err(EquivalenceFailure::Register {
                    seed,
                    index: i,
                    original: x,
                    transformed: y,
                });
            }
        }
        if a.state.memory.initialized_bytes() != b.state.memory.initialized_bytes() {
            return Err(EquivalenceFailure::Memory { seed });
        }
    }
    Ok(())
}
