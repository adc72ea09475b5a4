use std::ops::RangeInclusive;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lift::{lower, Item, ItemKind};
use crate::ir::{BinOp, Dialect, Expr, Instruction, IrFunction, Operand, Register, SP_INDEX};
use crate::microtrace::{micro_execute, splitmix64, Termination, TracerConfig};

pub const DEFAULT_SIZE: RangeInclusive<usize> = 6..=16;

/// Base of the scratch data region used by constant-address loads and stores.
const DATA_BASE: u64 = 0x2000;
/// Illegal call/jump targets live far above any code region.
const FAR_TARGET: u64 = 0xdead_0000;

/// Deterministic random function with roughly `size` instructions.
///
/// Loops are counted and jumps inside the body only go forward, so every
/// generated function terminates; the result is still re-checked under
/// micro-execution and regenerated from a derived seed if it does not.
pub fn gen_function(seed: u64, size: RangeInclusive<usize>) -> IrFunction {
    let cfg = TracerConfig::default();
    let mut s = seed;
    loop {
        let f = gen_once(s, size.clone());
        let terminates = (0..3).all(|k| {
            micro_execute(&f, splitmix64(s ^ k), &cfg).terminated_by != Termination::BudgetExhausted
        });
        if terminates {
            return f;
        }
        s = splitmix64(s);
    }
}

struct Gen {
    rng: ChaCha8Rng,
    dialect: Dialect,
    working: Vec<u8>,
    items: Vec<Item>,
}

impl Gen {
    fn reg(&self, i: u8) -> Register {
        Register::new(self.dialect, i)
    }

    fn pick(&mut self) -> Register {
        let i = *self.working.choose(&mut self.rng).unwrap();
        self.reg(i)
    }

    fn pick_except(&mut self, avoid: u8) -> Register {
        loop {
            let r = self.pick();
            if r.index != avoid {
                return r;
            }
        }
    }

    fn push(&mut self, i: Instruction) {
        let label = self.items.len();
        self.items.push(Item::plain(label, i));
    }

    fn small_const(&mut self) -> u64 {
        match self.rng.random_range(0..10) {
            0 => 0,
            1..=6 => self.rng.random_range(1..16),
            7 | 8 => self.rng.random_range(16..4096),
            _ => self.rng.random::<u32>() as u64,
        }
    }

    fn arith(&mut self, dst: Register) {
        let a = self.pick();
        let src = match self.rng.random_range(0..12) {
            0 => Expr::Const(self.small_const()),
            1 => Expr::Reg(a),
            2 => Expr::BinOp {
                op: BinOp::Mul,
                lhs: a,
                rhs: Operand::Const(1 << self.rng.random_range(1..5)),
            },
            3 | 4 => Expr::BinOp {
                op: if self.rng.random_bool(0.5) { BinOp::Add } else { BinOp::Sub },
                lhs: a,
                rhs: Operand::Const(self.rng.random_range(1..16)),
            },
            5 => Expr::BinOp {
                op: if self.rng.random_bool(0.5) { BinOp::Shl } else { BinOp::Shr },
                lhs: a,
                rhs: Operand::Const(self.rng.random_range(1..9)),
            },
            6 => Expr::BinOp {
                op: BinOp::Add,
                lhs: a,
                rhs: Operand::Reg(a),
            },
            _ => {
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::And, BinOp::Or, BinOp::Xor]
                    .choose(&mut self.rng)
                    .unwrap();
                let rhs = if self.rng.random_bool(0.6) {
                    Operand::Reg(self.pick())
                } else {
                    Operand::Const(self.small_const())
                };
                Expr::BinOp { op, lhs: a, rhs }
            }
        };
        self.push(Instruction::Assign { dst, src });
    }

    fn address(&mut self) -> Expr {
        let sp = self.reg(SP_INDEX);
        match self.rng.random_range(0..3) {
            0 => Expr::Const(DATA_BASE + 8 * self.rng.random_range(0..32)),
            1 => Expr::BinOp {
                op: BinOp::Add,
                lhs: self.pick(),
                rhs: Operand::Const(8 * self.rng.random_range(0..8)),
            },
            _ => Expr::BinOp {
                op: if self.rng.random_bool(0.5) { BinOp::Add } else { BinOp::Sub },
                lhs: sp,
                rhs: Operand::Const(8 * self.rng.random_range(0..32)),
            },
        }
    }

    fn block(&mut self) {
        match self.rng.random_range(0..100) {
            0..=37 => {
                let d = self.pick();
                self.arith(d);
            }
            38..=45 => {
                // Constant followed by an update of the same register.
                let d = self.pick();
                let c1 = self.small_const();
                self.push(Instruction::Assign {
                    dst: d,
                    src: Expr::Const(c1),
                });
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Xor, BinOp::Shl, BinOp::Mul]
                    .choose(&mut self.rng)
                    .unwrap();
                let c2 = self.rng.random_range(1..8);
                self.push(Instruction::Assign {
                    dst: d,
                    src: Expr::BinOp {
                        op,
                        lhs: d,
                        rhs: Operand::Const(c2),
                    },
                });
            }
            46..=57 => {
                let dst = self.pick();
                let addr = self.address();
                self.push(Instruction::Load { dst, addr });
            }
            58..=67 => {
                let value = if self.rng.random_bool(0.8) {
                    Expr::Reg(self.pick())
                } else {
                    Expr::Const(self.small_const())
                };
                let addr = self.address();
                self.push(Instruction::Store { value, addr });
            }
            68..=78 => {
                // Forward conditional skip over 1..=3 instructions.
                let c = self.pick();
                let cond = if self.rng.random_bool(0.5) {
                    Expr::Reg(c)
                } else {
                    Expr::BinOp {
                        op: BinOp::And,
                        lhs: c,
                        rhs: Operand::Const(1 << self.rng.random_range(0..4)),
                    }
                };
                let at = self.items.len();
                self.items.push(Item {
                    label: Some(at),
                    kind: ItemKind::Jump { cond, target: 0 },
                });
                for _ in 0..self.rng.random_range(1..=3) {
                    let d = self.pick();
                    self.arith(d);
                }
                let target = self.items.len();
                if let ItemKind::Jump { target: t, .. } = &mut self.items[at].kind {
                    *t = target;
                }
                // Guarantee an instruction exists at the target.
                let d = self.pick();
                self.arith(d);
            }
            79..=85 => {
                // Counted loop; the body never writes the counter.
                let k = self.pick();
                let count = self.rng.random_range(2..=5);
                self.push(Instruction::Assign {
                    dst: k,
                    src: Expr::Const(count),
                });
                let start = self.items.len();
                for _ in 0..self.rng.random_range(1..=3) {
                    let d = self.pick_except(k.index);
                    self.arith(d);
                }
                self.push(Instruction::Assign {
                    dst: k,
                    src: Expr::BinOp {
                        op: BinOp::Sub,
                        lhs: k,
                        rhs: Operand::Const(1),
                    },
                });
                let at = self.items.len();
                self.items.push(Item {
                    label: Some(at),
                    kind: ItemKind::Jump {
                        cond: Expr::Reg(k),
                        target: start,
                    },
                });
            }
            86..=92 => {
                let target = if self.rng.random_bool(0.5) {
                    Expr::Const(FAR_TARGET + 16 * self.rng.random_range(0..256))
                } else {
                    Expr::Reg(self.pick())
                };
                self.push(Instruction::Call { target });
            }
            93..=95 => {
                let cond = Expr::Reg(self.pick());
                let target = Expr::Const(FAR_TARGET + 4 * self.rng.random_range(0..1024));
                self.push(Instruction::Jmp { cond, target });
            }
            _ => self.push(Instruction::Nop),
        }
    }
}

fn gen_once(seed: u64, size: RangeInclusive<usize>) -> IrFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialect = if rng.random_bool(0.5) {
        Dialect::ArchA
    } else {
        Dialect::ArchB
    };
    let target = rng.random_range(size);
    let mut pool: Vec<u8> = (0..SP_INDEX).collect();
    pool.shuffle(&mut rng);
    let n_work = rng.random_range(4..=8);
    let working = pool[..n_work].to_vec();
    let mut g = Gen {
        rng,
        dialect,
        working,
        items: Vec::new(),
    };
    while g.items.len() + 1 < target {
        g.block();
    }
    if g.rng.random_bool(0.9) || g.items.is_empty() {
        g.push(Instruction::Ret);
    }
    IrFunction::new(format!("gen_{seed}"), dialect, lower(&g.items))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn deterministic() {
        assert_eq!(gen_function(42, 5..=10), gen_function(42, 5..=10));
        assert_ne!(gen_function(42, 5..=10), gen_function(43, 5..=10));
    }

    #[test]
    fn valid_and_terminating() {
        let cfg = TracerConfig::default();
        let mut terminated = 0;
        for seed in 0..1000 {
            let f = gen_function(seed, DEFAULT_SIZE);
            assert!(validate(&f).is_empty(), "seed {seed}");
            let t = micro_execute(&f, seed, &cfg);
            if matches!(t.terminated_by, Termination::Ret | Termination::EndOfCode) {
                terminated += 1;
            }
        }
        assert!(terminated >= 990, "{terminated}");
    }

    #[test]
    fn uses_both_dialects_and_all_forms() {
        let fs: Vec<_> = (0..200).map(|s| gen_function(s, DEFAULT_SIZE)).collect();
        assert!(fs.iter().any(|f| f.dialect == Dialect::ArchA));
        assert!(fs.iter().any(|f| f.dialect == Dialect::ArchB));
        let all: Vec<&Instruction> = fs.iter().flat_map(|f| &f.instructions).collect();
        assert!(all.iter().any(|i| matches!(i, Instruction::Load { .. })));
        assert!(all.iter().any(|i| matches!(i, Instruction::Store { .. })));
        assert!(all.iter().any(|i| matches!(i, Instruction::Jmp { .. })));
        assert!(all.iter().any(|i| matches!(i, Instruction::Call { .. })));
        assert!(all.iter().any(|i| matches!(i, Instruction::Nop)));
    }
}
