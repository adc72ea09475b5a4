use std::fmt;

use super::{IrFunction, MAX_INSTRUCTIONS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonEmpty,
    TooLong { len: usize, max: usize },
    /// A register of another dialect at instruction `index`.
    Dialect { index: usize, register: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonEmpty => f.write_str("function has no instructions"),
            Violation::TooLong { len, max } => write!(f, "{len} instructions exceeds maximum {max}"),
            Violation::Dialect { index, register } => {
                write!(f, "instruction {index}: register {register} belongs to another dialect")
            }
        }
    }
}

/// Returns every invariant violation; empty means the function is valid.
pub fn validate(f: &IrFunction) -> Vec<Violation> {
    let mut out = Vec::new();
    if f.instructions.is_empty() {
        out.push(Violation::NonEmpty);
    }
    if f.instructions.len() > MAX_INSTRUCTIONS {
        out.push(Violation::TooLong {
            len: f.instructions.len(),
            max: MAX_INSTRUCTIONS,
        });
    }
    for (index, instr) in f.instructions.iter().enumerate() {
        for reg in instr.registers() {
            if reg.dialect != f.dialect {
                out.push(Violation::Dialect {
                    index,
                    register: reg.to_string(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Dialect, Expr, Instruction, Register};

    #[test]
    fn valid_function_has_no_violations() {
        let r1 = Register::new(Dialect::ArchA, 1);
        let f = IrFunction::new(
            "f",
            Dialect::ArchA,
            vec![
                Instruction::Assign {
                    dst: r1,
                    src: Expr::Const(1),
                },
                Instruction::Ret,
            ],
        );
        assert!(validate(&f).is_empty());
    }

    #[test]
    fn empty_function() {
        let f = IrFunction::new("f", Dialect::ArchA, vec![]);
        assert_eq!(validate(&f), vec![Violation::NonEmpty]);
    }

    #[test]
    fn foreign_register() {
        let s1 = Register::new(Dialect::ArchB, 1);
        let f = IrFunction::new(
            "f",
            Dialect::ArchA,
            vec![Instruction::Call {
                target: Expr::Reg(s1),
            }],
        );
        assert_eq!(
            validate(&f),
            vec![Violation::Dialect {
                index: 0,
                register: "s1".into()
            }]
        );
    }

    #[test]
    fn too_long() {
        let f = IrFunction::new("f", Dialect::ArchA, vec![Instruction::Nop; MAX_INSTRUCTIONS + 1]);
        assert!(matches!(validate(&f)[0], Violation::TooLong { .. }));
    }
}
