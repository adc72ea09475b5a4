//! Label-based view of a function so passes can insert and remove
//! instructions without breaking constant jump targets.

use std::collections::HashMap;

use crate::ir::{Expr, Instruction, IrFunction};
use crate::microtrace::{code_addr, CODE_BASE, INSTR_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum ItemKind {
    Instr(Instruction),
    /// `jmp cond, <address of the item labelled target>`.
    Jump { cond: Expr, target: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Item {
    pub label: Option<usize>,
    pub kind: ItemKind,
}

impl Item {
    pub fn plain(label: usize, i: Instruction) -> Item {
        Item {
            label: Some(label),
            kind: ItemKind::Instr(i),
        }
    }

    pub fn unlabelled(kind: ItemKind) -> Item {
        Item { label: None, kind }
    }
}

/// Labels every instruction with its index; in-range constant jump targets
/// become label references.
pub(crate) fn lift(f: &IrFunction) -> Vec<Item> {
    let end = code_addr(f.len());
    f.instructions
        .iter()
        .enumerate()
        .map(|(i, instr)| {
            let kind = match instr {
                Instruction::Jmp {
                    cond,
                    target: Expr::Const(t),
                } if (CODE_BASE..end).contains(t) => ItemKind::Jump {
                    cond: *cond,
                    target: ((t - CODE_BASE) / INSTR_SIZE) as usize,
                },
                other => ItemKind::Instr(other.clone()),
            };
            Item {
                label: Some(i),
                kind,
            }
        })
        .collect()
}

/// Number of jumps referring to `label`.
pub(crate) fn references(items: &[Item], label: usize) -> usize {
    items
        .iter()
        .filter(|it| matches!(it.kind, ItemKind::Jump { target, .. } if target == label))
        .count()
}

pub(crate) fn next_label(items: &[Item]) -> usize {
    items.iter().filter_map(|i| i.label).max().map_or(0, |m| m + 1)
}

pub(crate) fn lower(items: &[Item]) -> Vec<Instruction> {
    let pos: HashMap<usize, usize> = items
        .iter()
        .enumerate()
        .filter_map(|(p, it)| it.label.map(|l| (l, p)))
        .collect();
    items
        .iter()
        .map(|it| match &it.kind {
            ItemKind::Instr(i) => i.clone(),
            ItemKind::Jump { cond, target } => Instruction::Jmp {
                cond: *cond,
                target: Expr::Const(code_addr(
                    *pos.get(target).expect("jump to a removed label"),
                )),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_function, Dialect};

    #[test]
    fn lift_lower_identity() {
        let f = parse_function(
            "r1 := 0x2\njmp r1, 0x1008\nr2 := 0x1\njmp 0x1, 0xdead0000\nret",
            Dialect::ArchA,
        )
        .unwrap();
        let items = lift(&f);
        assert!(matches!(items[1].kind, ItemKind::Jump { target: 2, .. }));
        assert!(matches!(items[3].kind, ItemKind::Instr(_)));
        assert_eq!(lower(&items), f.instructions);
    }

    #[test]
    fn insertion_relocates() {
        let f = parse_function("jmp 0x1, 0x1004\nret", Dialect::ArchA).unwrap();
        let mut items = lift(&f);
        items.insert(1, Item::unlabelled(ItemKind::Instr(Instruction::Nop)));
        let out = lower(&items);
        assert_eq!(
            out[0],
            Instruction::Jmp {
                cond: Expr::Const(1),
                target: Expr::Const(0x1008)
            }
        );
        assert_eq!(references(&items, 1), 1);
        assert_eq!(next_label(&items), 2);
    }
}
