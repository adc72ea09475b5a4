//! The toy IR: a line-based, two-dialect assembly standing in for real ISAs.
//!
//! Concrete syntax (archA keywords shown, archB substitutes its own table):
//!
//! ```text
//! r1 := 0x2
//! r1 := r1 + 0x3
//! r2 := load(r15 + 0x8)
//! store(r2, 0x2000)
//! jmp r1, 0x1008
//! call 0xdead0000
//! ret
//! nop
//! ```
//!
//! Function files (`.irfn`) start with a header `fn <id> @<dialect>`; lines
//! beginning with `#` are comments.

mod dialect;
pub mod lexer;
mod parse;
mod validate;

use std::fmt::{self, Write as _};

pub use dialect::{Dialect, KeywordTable, Register, NUM_REGISTERS, SP_INDEX};
pub use parse::{parse_function, parse_irfn, ParseError, ParseErrorKind};
pub use validate::{validate, Violation};

/// Upper bound on instructions per function.
pub const MAX_INSTRUCTIONS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add = 0,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    /// Wrapping 64-bit semantics; shift amounts are taken mod 64.
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a << (b & 63),
            BinOp::Shr => a >> (b & 63),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Register),
    Const(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(u64),
    Reg(Register),
    BinOp {
        op: BinOp,
        lhs: Register,
        rhs: Operand,
    },
}

impl Expr {
    pub fn registers(&self) -> impl Iterator<Item = Register> {
        let (a, b) = match *self {
            Expr::Const(_) => (None, None),
            Expr::Reg(r) => (Some(r), None),
            Expr::BinOp { lhs, rhs, .. } => (
                Some(lhs),
                match rhs {
                    Operand::Reg(r) => Some(r),
                    Operand::Const(_) => None,
                },
            ),
        };
        a.into_iter().chain(b)
    }

    /// Applies `f` to every register in the expression.
    pub fn map_registers(self, mut f: impl FnMut(Register) -> Register) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(c),
            Expr::Reg(r) => Expr::Reg(f(r)),
            Expr::BinOp { op, lhs, rhs } => Expr::BinOp {
                op,
                lhs: f(lhs),
                rhs: match rhs {
                    Operand::Reg(r) => Operand::Reg(f(r)),
                    c => c,
                },
            },
        }
    }

    fn render(&self, dialect: Dialect, out: &mut String) {
        match self {
            Expr::Const(c) => write!(out, "{c:#x}").unwrap(),
            Expr::Reg(r) => write!(out, "{r}").unwrap(),
            Expr::BinOp { op, lhs, rhs } => {
                write!(out, "{lhs} {} ", dialect.keywords().op(*op)).unwrap();
                match rhs {
                    Operand::Reg(r) => write!(out, "{r}").unwrap(),
                    Operand::Const(c) => write!(out, "{c:#x}").unwrap(),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Assign { dst: Register, src: Expr },
    Load { dst: Register, addr: Expr },
    Store { value: Expr, addr: Expr },
    Jmp { cond: Expr, target: Expr },
    Call { target: Expr },
    Ret,
    Nop,
}

impl Instruction {
    /// Registers in textual order.
    pub fn registers(&self) -> Vec<Register> {
        let mut regs = Vec::new();
        match self {
            Instruction::Assign { dst, src } => {
                regs.push(*dst);
                regs.extend(src.registers());
            }
            Instruction::Load { dst, addr } => {
                regs.push(*dst);
                regs.extend(addr.registers());
            }
            Instruction::Store { value, addr } => {
                regs.extend(value.registers());
                regs.extend(addr.registers());
            }
            Instruction::Jmp { cond, target } => {
                regs.extend(cond.registers());
                regs.extend(target.registers());
            }
            Instruction::Call { target } => regs.extend(target.registers()),
            Instruction::Ret | Instruction::Nop => {}
        }
        regs
    }

    pub fn map_registers(&self, mut f: impl FnMut(Register) -> Register) -> Instruction {
        match self {
            Instruction::Assign { dst, src } => Instruction::Assign {
                dst: f(*dst),
                src: src.map_registers(&mut f),
            },
            Instruction::Load { dst, addr } => Instruction::Load {
                dst: f(*dst),
                addr: addr.map_registers(&mut f),
            },
            Instruction::Store { value, addr } => Instruction::Store {
                value: value.map_registers(&mut f),
                addr: addr.map_registers(&mut f),
            },
            Instruction::Jmp { cond, target } => Instruction::Jmp {
                cond: cond.map_registers(&mut f),
                target: target.map_registers(&mut f),
            },
            Instruction::Call { target } => Instruction::Call {
                target: target.map_registers(&mut f),
            },
            Instruction::Ret => Instruction::Ret,
            Instruction::Nop => Instruction::Nop,
        }
    }

    pub fn render(&self, dialect: Dialect) -> String {
        let kw = dialect.keywords();
        let mut out = String::new();
        match self {
            Instruction::Assign { dst, src } => {
                write!(out, "{dst} := ").unwrap();
                src.render(dialect, &mut out);
            }
            Instruction::Load { dst, addr } => {
                write!(out, "{dst} := {}(", kw.load).unwrap();
                addr.render(dialect, &mut out);
                out.push(')');
            }
            Instruction::Store { value, addr } => {
                write!(out, "{}(", kw.store).unwrap();
                value.render(dialect, &mut out);
                out.push_str(", ");
                addr.render(dialect, &mut out);
                out.push(')');
            }
            Instruction::Jmp { cond, target } => {
                write!(out, "{} ", kw.jmp).unwrap();
                cond.render(dialect, &mut out);
                out.push_str(", ");
                target.render(dialect, &mut out);
            }
            Instruction::Call { target } => {
                write!(out, "{} ", kw.call).unwrap();
                target.render(dialect, &mut out);
            }
            Instruction::Ret => out.push_str(kw.ret),
            Instruction::Nop => out.push_str(kw.nop),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IrFunction {
    pub id: String,
    pub dialect: Dialect,
    pub instructions: Vec<Instruction>,
}

impl IrFunction {
    pub fn new(id: impl Into<String>, dialect: Dialect, instructions: Vec<Instruction>) -> Self {
        IrFunction {
            id: id.into(),
            dialect,
            instructions,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

/// Renders the instruction lines of `f`, newline-separated, no header.
pub fn render(f: &IrFunction) -> String {
    f.instructions
        .iter()
        .map(|i| i.render(f.dialect))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders `f` as an `.irfn` file: header line plus instructions.
pub fn render_irfn(f: &IrFunction) -> String {
    let mut out = format!("fn {} @{}\n", f.id, f.dialect);
    for i in &f.instructions {
        out.push_str(&i.render(f.dialect));
        out.push('\n');
    }
    out
}

impl fmt::Display for IrFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u8) -> Register {
        Register::new(Dialect::ArchA, i)
    }

    #[test]
    fn renders_ret() {
        let f = IrFunction::new("", Dialect::ArchA, vec![Instruction::Ret]);
        assert_eq!(render(&f), "ret");
    }

    #[test]
    fn renders_constants_in_hex() {
        let i = Instruction::Assign {
            dst: r(1),
            src: Expr::Const(0xff),
        };
        assert_eq!(i.render(Dialect::ArchA), "r1 := 0xff");
    }

    #[test]
    fn renders_archb_keywords() {
        let s = |i| Register::new(Dialect::ArchB, i);
        let i = Instruction::Assign {
            dst: s(1),
            src: Expr::BinOp {
                op: BinOp::Add,
                lhs: s(2),
                rhs: Operand::Reg(s(3)),
            },
        };
        assert_eq!(i.render(Dialect::ArchB), "s1 := s2 plus s3");
        let st = Instruction::Store {
            value: Expr::Reg(s(1)),
            addr: Expr::Const(0x2000),
        };
        assert_eq!(st.render(Dialect::ArchB), "put(s1, 0x2000)");
    }

    #[test]
    fn binop_semantics_wrap() {
        assert_eq!(BinOp::Add.apply(u64::MAX, 2), 1);
        assert_eq!(BinOp::Sub.apply(1, u64::MAX), 2);
        assert_eq!(BinOp::Shl.apply(1, 65), 2);
        assert_eq!(BinOp::Shr.apply(8, 3), 1);
    }

    #[test]
    fn irfn_header() {
        let f = IrFunction::new("f7", Dialect::ArchB, vec![Instruction::Nop]);
        assert_eq!(render_irfn(&f), "fn f7 @archB\nskip\n");
    }
}
