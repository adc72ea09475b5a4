//! Reference interpreter for straight-line functions, written against the
//! instruction semantics only, plus a generator of such functions.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semtrace::ir::{BinOp, Dialect, Expr, Instruction, IrFunction, Operand, Register};

pub const REGS: usize = 16;
pub const SP: usize = 15;
pub const STACK_BASE: u64 = 0x7fff_0000;
pub const STACK_SIZE: u64 = 4096;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, PartialEq, Eq)]
pub struct EndState {
    pub registers: [u64; REGS],
    /// Every byte written or read.
    pub memory: BTreeMap<u64, u8>,
}

struct Naive {
    seed: u64,
    regs: [u64; REGS],
    mem: BTreeMap<u64, u8>,
}

impl Naive {
    fn new(seed: u64) -> Naive {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut regs = [0u64; REGS];
        for (i, r) in regs.iter_mut().enumerate() {
            *r = if i == SP {
                STACK_BASE + STACK_SIZE / 2
            } else {
                u64::from(rng.next_u32())
            };
        }
        Naive {
            seed,
            regs,
            mem: BTreeMap::new(),
        }
    }

    fn operand(&self, o: Operand) -> u64 {
        match o {
            Operand::Reg(r) => self.regs[r.index as usize],
            Operand::Const(c) => c,
        }
    }

    fn eval(&self, e: &Expr) -> u64 {
        match *e {
            Expr::Const(c) => c,
            Expr::Reg(r) => self.regs[r.index as usize],
            Expr::BinOp { op, lhs, rhs } => {
                let a = self.regs[lhs.index as usize];
                let b = self.operand(rhs);
                match op {
                    BinOp::Add => a.wrapping_add(b),
                    BinOp::Sub => a.wrapping_sub(b),
                    BinOp::Mul => a.wrapping_mul(b),
                    BinOp::And => a & b,
                    BinOp::Or => a | b,
                    BinOp::Xor => a ^ b,
                    BinOp::Shl => a.checked_shl((b % 64) as u32).unwrap(),
                    BinOp::Shr => a.checked_shr((b % 64) as u32).unwrap(),
                }
            }
        }
    }

    fn load(&mut self, addr: u64) -> u64 {
        let mut v = 0u64;
        for k in (0..8u64).rev() {
            let a = addr.wrapping_add(k);
            let seed = self.seed;
            let b = *self
                .mem
                .entry(a)
                .or_insert_with(|| (mix(seed ^ mix(a)) & 0xff) as u8);
            v = (v << 8) | u64::from(b);
        }
        v
    }

    fn store(&mut self, addr: u64, v: u64) {
        for k in 0..8u64 {
            self.mem.insert(addr.wrapping_add(k), (v >> (8 * k)) as u8);
        }
    }
}

/// Runs a jump-free function from the seeded initial state.
pub fn naive_run(f: &IrFunction, seed: u64) -> EndState {
    let mut m = Naive::new(seed);
    for ins in &f.instructions {
        match ins {
            Instruction::Assign { dst, src } => m.regs[dst.index as usize] = m.eval(src),
            Instruction::Load { dst, addr } => {
                let a = m.eval(addr);
                m.regs[dst.index as usize] = m.load(a);
            }
            Instruction::Store { value, addr } => {
                let (v, a) = (m.eval(value), m.eval(addr));
                m.store(a, v);
            }
            Instruction::Call { .. } | Instruction::Nop => {}
            Instruction::Ret => break,
            Instruction::Jmp { .. } => panic!("naive interpreter has no jumps"),
        }
    }
    EndState {
        registers: m.regs,
        memory: m.mem,
    }
}

fn reg(rng: &mut ChaCha8Rng, d: Dialect) -> Register {
    Register::new(d, rng.random_range(0..REGS as u8))
}

fn value(rng: &mut ChaCha8Rng) -> u64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(0..16),
        1 => rng.random_range(0..=u64::from(u32::MAX)),
        2 => rng.random(),
        _ => 1 << rng.random_range(0..64),
    }
}

fn expr(rng: &mut ChaCha8Rng, d: Dialect) -> Expr {
    match rng.random_range(0..3) {
        0 => Expr::Const(value(rng)),
        1 => Expr::Reg(reg(rng, d)),
        _ => Expr::BinOp {
            op: BinOp::ALL[rng.random_range(0..BinOp::ALL.len())],
            lhs: reg(rng, d),
            rhs: if rng.random_bool(0.5) {
                Operand::Reg(reg(rng, d))
            } else {
                Operand::Const(value(rng))
            },
        },
    }
}

fn address(rng: &mut ChaCha8Rng, d: Dialect) -> Expr {
    match rng.random_range(0..4) {
        0 => Expr::BinOp {
            op: BinOp::Sub,
            lhs: Register::sp(d),
            rhs: Operand::Const(rng.random_range(0..64)),
        },
        1 => Expr::Const(0x2000 + rng.random_range(0..64)),
        2 => Expr::Const(rng.random()),
        _ => expr(rng, d),
    }
}

/// Random function of 1..=24 instructions without jumps.
pub fn straight_line(seed: u64) -> IrFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = if rng.random_bool(0.5) { Dialect::ArchA } else { Dialect::ArchB };
    let n = rng.random_range(1..=24);
    let instructions = (0..n)
        .map(|_| match rng.random_range(0..20) {
            0..=7 => Instruction::Assign {
                dst: reg(&mut rng, d),
                src: expr(&mut rng, d),
            },
            8..=11 => Instruction::Load {
                dst: reg(&mut rng, d),
                addr: address(&mut rng, d),
            },
            12..=15 => Instruction::Store {
                value: expr(&mut rng, d),
                addr: address(&mut rng, d),
            },
            16 | 17 => Instruction::Call {
                target: expr(&mut rng, d),
            },
            18 => Instruction::Nop,
            _ => Instruction::Ret,
        })
        .collect();
    IrFunction::new(format!("line{seed}"), d, instructions)
}
