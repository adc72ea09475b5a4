//! Micro-execution of single IR functions.
//!
//! A function runs from its first instruction with randomized registers and
//! on-demand memory. Jumps and calls whose targets fall outside the code
//! region are skipped, `nop` is skipped, and every executed instruction
//! emits a step carrying the values of its register and constant tokens as
//! they were *before* the instruction ran.

mod json;
mod memory;

use std::ops::Range;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::lexer::{lex, Lexeme};
use crate::ir::{Dialect, Expr, Instruction, IrFunction, Operand, NUM_REGISTERS, SP_INDEX};

pub use json::{read_traces, write_traces, TraceFormatError};
pub use memory::{splitmix64, uninit_byte, Memory, PAGE_SIZE};

pub const CODE_BASE: u64 = 0x1000;
/// Address stride of one instruction in the code region.
pub const INSTR_SIZE: u64 = 4;
pub const STACK_BASE: u64 = 0x7fff_0000;

/// Address of instruction `index` in the code region.
pub fn code_addr(index: usize) -> u64 {
    CODE_BASE + INSTR_SIZE * index as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TracerConfig {
    pub step_budget: usize,
    pub stack_size: u64,
}

impl Default for TracerConfig {
    fn default() -> Self {
        TracerConfig {
            step_budget: 4096,
            stack_size: 4096,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Ret,
    EndOfCode,
    BudgetExhausted,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Ret => "ret",
            Termination::EndOfCode => "end_of_code",
            Termination::BudgetExhausted => "budget_exhausted",
        }
    }
}

/// One executed instruction. `values` is aligned with the lexemes of `text`;
/// `None` is the dummy value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub index: usize,
    pub text: String,
    pub values: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicroTrace {
    pub fn_id: String,
    pub dialect: Dialect,
    pub steps: Vec<TraceStep>,
    pub terminated_by: Termination,
}

impl MicroTrace {
    pub fn is_dummy(&self) -> bool {
        self.steps.iter().all(|s| s.values.iter().all(Option::is_none))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub registers: [u64; NUM_REGISTERS as usize],
    pub memory: Memory,
    pub pc: usize,
    pub step_count: usize,
    pub seed: u64,
    pub code_region: Range<u64>,
    pub stack_region: Range<u64>,
}

impl MachineState {
    /// Maps code and stack, points `sp` into the middle of the stack, and
    /// draws every other register uniformly from `[0, 2^32)`.
    pub fn new(f: &IrFunction, seed: u64, cfg: &TracerConfig) -> MachineState {
        let mut memory = Memory::new();
        let code_region = CODE_BASE..code_addr(f.len());
        memory.map(CODE_BASE, code_region.end - code_region.start);
        let stack_region = STACK_BASE..STACK_BASE + cfg.stack_size;
        memory.map(STACK_BASE, cfg.stack_size);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registers = [0u64; NUM_REGISTERS as usize];
        for (i, r) in registers.iter_mut().enumerate() {
            if i == SP_INDEX as usize {
                *r = STACK_BASE + cfg.stack_size / 2;
            } else {
                *r = u64::from(rng.next_u32());
            }
        }
        MachineState {
            registers,
            memory,
            pc: 0,
            step_count: 0,
            seed,
            code_region,
            stack_region,
        }
    }

    pub fn sp(&self) -> u64 {
        self.registers[SP_INDEX as usize]
    }

    fn eval(&self, e: &Expr) -> u64 {
        match *e {
            Expr::Const(c) => c,
            Expr::Reg(r) => self.registers[r.index as usize],
            Expr::BinOp { op, lhs, rhs } => {
                let b = match rhs {
                    Operand::Reg(r) => self.registers[r.index as usize],
                    Operand::Const(c) => c,
                };
                op.apply(self.registers[lhs.index as usize], b)
            }
        }
    }

    fn code_index(&self, target: u64) -> Option<usize> {
        self.code_region
            .contains(&target)
            .then(|| ((target - CODE_BASE) / INSTR_SIZE) as usize)
    }

    /// Executes `instr` as if it sat at `self.pc`, advancing `pc`.
    pub fn step(&mut self, instr: &Instruction, dialect: Dialect) -> StepRecord {
        let plan = StepPlan::new(instr, dialect);
        self.step_planned(instr, &plan)
    }

    fn step_planned(&mut self, instr: &Instruction, plan: &StepPlan) -> StepRecord {
        let index = self.pc;
        let values: Vec<Option<u64>> = plan
            .sources
            .iter()
            .map(|s| match *s {
                ValueSource::Dummy => None,
                ValueSource::Reg(i) => Some(self.registers[i as usize]),
                ValueSource::Const(c) => Some(c),
            })
            .collect();
        let record = |control| StepRecord {
            step: Some(TraceStep {
                index,
                text: plan.text.clone(),
                values: values.clone(),
            }),
            control,
        };
        let out = match instr {
            Instruction::Assign { dst, src } => {
                self.registers[dst.index as usize] = self.eval(src);
                record(Control::Next)
            }
            Instruction::Load { dst, addr } => {
                let a = self.eval(addr);
                self.registers[dst.index as usize] = self.memory.load_u64(a, self.seed);
                record(Control::Next)
            }
            Instruction::Store { value, addr } => {
                let (v, a) = (self.eval(value), self.eval(addr));
                self.memory.store_u64(a, v);
                record(Control::Next)
            }
            Instruction::Jmp { cond, target } => match self.code_index(self.eval(target)) {
                None => StepRecord::skipped(),
                Some(t) => {
                    if self.eval(cond) != 0 {
                        record(Control::Jump(t))
                    } else {
                        record(Control::Next)
                    }
                }
            },
            // A call never transfers into another function: an in-range
            // callee is recorded and returns immediately.
            Instruction::Call { target } => match self.code_index(self.eval(target)) {
                None => StepRecord::skipped(),
                Some(_) => record(Control::Next),
            },
            Instruction::Ret => record(Control::Terminate),
            Instruction::Nop => StepRecord::skipped(),
        };
        if out.step.is_some() {
            self.step_count += 1;
        }
        match out.control {
            Control::Next => self.pc += 1,
            Control::Jump(t) => self.pc = t,
            Control::Terminate => {}
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Next,
    Jump(usize),
    Terminate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    /// `None` when the instruction was skipped (nop, illegal jump/call).
    pub step: Option<TraceStep>,
    pub control: Control,
}

impl StepRecord {
    fn skipped() -> StepRecord {
        StepRecord {
            step: None,
            control: Control::Next,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ValueSource {
    Dummy,
    Reg(u8),
    Const(u64),
}

/// Rendered text of an instruction plus where each token's value comes from.
struct StepPlan {
    text: String,
    sources: Vec<ValueSource>,
}

impl StepPlan {
    fn new(instr: &Instruction, dialect: Dialect) -> StepPlan {
        let text = instr.render(dialect);
        let sources = lex(&text)
            .expect("rendered instructions always lex")
            .into_iter()
            .map(|l| match l {
                Lexeme::Number(n) => ValueSource::Const(n),
                Lexeme::Word(w) => match dialect.register(&w) {
                    Some(r) => ValueSource::Reg(r.index),
                    None => ValueSource::Dummy,
                },
                Lexeme::Punct(_) => ValueSource::Dummy,
            })
            .collect();
        StepPlan { text, sources }
    }
}

/// Result of running a function to termination.
#[derive(Clone, Debug)]
pub struct Execution {
    pub trace: MicroTrace,
    pub state: MachineState,
}

pub fn init_state(f: &IrFunction, seed: u64, cfg: &TracerConfig) -> MachineState {
    MachineState::new(f, seed, cfg)
}

/// Runs `f` from an explicit initial state.
pub fn run_from(f: &IrFunction, mut state: MachineState, cfg: &TracerConfig) -> Execution {
    let plans: Vec<StepPlan> = f
        .instructions
        .iter()
        .map(|i| StepPlan::new(i, f.dialect))
        .collect();
    let mut steps = Vec::new();
    let terminated_by = loop {
        if state.pc >= f.len() {
            break Termination::EndOfCode;
        }
        if steps.len() >= cfg.step_budget {
            break Termination::BudgetExhausted;
        }
        let pc = state.pc;
        let rec = state.step_planned(&f.instructions[pc], &plans[pc]);
        if let Some(s) = rec.step {
            steps.push(s);
        }
        if rec.control == Control::Terminate {
            break Termination::Ret;
        }
    };
    Execution {
        trace: MicroTrace {
            fn_id: f.id.clone(),
            dialect: f.dialect,
            steps,
            terminated_by,
        },
        state,
    }
}

pub fn execute(f: &IrFunction, seed: u64, cfg: &TracerConfig) -> Execution {
    run_from(f, MachineState::new(f, seed, cfg), cfg)
}

pub fn micro_execute(f: &IrFunction, seed: u64, cfg: &TracerConfig) -> MicroTrace {
    execute(f, seed, cfg).trace
}

/// The static code of `f` in order, with every value dummy.
pub fn dummy_trace(f: &IrFunction) -> MicroTrace {
    let steps = f
        .instructions
        .iter()
        .enumerate()
        .map(|(index, i)| {
            let plan = StepPlan::new(i, f.dialect);
            TraceStep {
                index,
                text: plan.text,
                values: vec![None; plan.sources.len()],
            }
        })
        .collect();
    MicroTrace {
        fn_id: f.id.clone(),
        dialect: f.dialect,
        steps,
        terminated_by: Termination::EndOfCode,
    }
}

/// One concrete trace per seed, followed by the dummy trace.
pub fn trace_batch(f: &IrFunction, seeds: &[u64], cfg: &TracerConfig) -> Vec<MicroTrace> {
    seeds
        .iter()
        .map(|&s| micro_execute(f, s, cfg))
        .chain(std::iter::once(dummy_trace(f)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_function, Register};

    fn a(text: &str) -> IrFunction {
        parse_function(text, Dialect::ArchA).unwrap()
    }

    fn reg(i: u8) -> usize {
        Register::new(Dialect::ArchA, i).index as usize
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let f = a("ret");
        let cfg = TracerConfig::default();
        assert_eq!(init_state(&f, 1, &cfg), init_state(&f, 1, &cfg));
        let s1 = init_state(&f, 1, &cfg);
        let s2 = init_state(&f, 2, &cfg);
        assert!((0..15).any(|i| s1.registers[i] != s2.registers[i]));
        assert!(s1.stack_region.contains(&s1.sp()));
        assert!(s1.registers.iter().enumerate().all(|(i, v)| i == 15 || *v < 1 << 32));
        assert_eq!(s1.pc, 0);
        assert!(s1.memory.is_mapped(CODE_BASE) && s1.memory.is_mapped(STACK_BASE));
    }

    #[test]
    fn step_records_pre_values() {
        let f = a("r2 := r1 + 0x4");
        let mut st = init_state(&f, 5, &TracerConfig::default());
        st.registers[reg(1)] = 2;
        let old_r2 = st.registers[reg(2)];
        let rec = st.step(&f.instructions[0], f.dialect);
        assert_eq!(st.registers[reg(2)], 6);
        let step = rec.step.unwrap();
        assert_eq!(step.text, "r2 := r1 + 0x4");
        assert_eq!(step.values, vec![Some(old_r2), None, Some(2), None, Some(4)]);
    }

    #[test]
    fn pre_value_of_destination_is_old_value() {
        let f = a("r3 := 0x8\nr3 := 0x3");
        let t = micro_execute(&f, 1, &TracerConfig::default());
        assert_eq!(t.steps[1].values[0], Some(8));
    }

    #[test]
    fn illegal_call_is_skipped() {
        let mut body = vec!["call 0xdeadbeef"];
        body.extend(std::iter::repeat_n("nop", 15));
        let f = a(&body.join("\n"));
        let mut st = init_state(&f, 1, &TracerConfig::default());
        assert_eq!(st.code_region, 0x1000..0x1040);
        let rec = st.step(&f.instructions[0], f.dialect);
        assert!(rec.step.is_none());
        assert_eq!(st.pc, 1);
    }

    #[test]
    fn read_after_write() {
        let f = a("store(0x5, 0x2000)\nr2 := load(0x2000)\nret");
        let ex = execute(&f, 9, &TracerConfig::default());
        assert_eq!(ex.state.registers[reg(2)], 5);
        assert_eq!(ex.trace.terminated_by, Termination::Ret);
    }

    #[test]
    fn forced_arithmetic_sequence() {
        let f = a("r1 := 2\nr1 := r1 - 1\nr1 := r1 + 3\nret");
        let ex = execute(&f, 3, &TracerConfig::default());
        assert_eq!(ex.state.registers[reg(1)], 4);
        assert_eq!(ex.trace.terminated_by, Termination::Ret);
        assert_eq!(ex.trace.steps.len(), 4);
    }

    #[test]
    fn infinite_loop_exhausts_budget() {
        let f = a("jmp 1, 0x1000");
        let cfg = TracerConfig {
            step_budget: 100,
            ..Default::default()
        };
        let t = micro_execute(&f, 1, &cfg);
        assert_eq!(t.steps.len(), 100);
        assert_eq!(t.terminated_by, Termination::BudgetExhausted);
    }

    #[test]
    fn taken_and_untaken_jumps() {
        // r1 = 0 so the first jump falls through; the second always jumps over r2 := 7.
        let f = a("r1 := 0\njmp r1, 0x1010\njmp 1, 0x1010\nr2 := 7\nr3 := 1\nret");
        let ex = execute(&f, 4, &TracerConfig::default());
        let idx: Vec<_> = ex.trace.steps.iter().map(|s| s.index).collect();
        assert_eq!(idx, [0, 1, 2, 4, 5]);
        assert_ne!(ex.state.registers[reg(2)], 7);
    }

    #[test]
    fn nops_are_not_traced_and_end_of_code() {
        let f = a("nop\nr1 := 1\nnop");
        let t = micro_execute(&f, 0, &TracerConfig::default());
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.terminated_by, Termination::EndOfCode);
    }

    #[test]
    fn batch_appends_dummy() {
        let f = a("r1 := r2 + 0x1\nret");
        let b = trace_batch(&f, &[1, 2, 3], &TracerConfig::default());
        assert_eq!(b.len(), 4);
        assert!(b[3].is_dummy());
        assert!(!b[0].is_dummy());
        assert_eq!(b[3].steps.len(), 2);

        let r = a("ret");
        let b = trace_batch(&r, &[7], &TracerConfig::default());
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|t| t.steps.len() == 1 && t.steps[0].text == "ret"));
    }

    #[test]
    fn memory_accesses_stay_mapped() {
        let f = a("r2 := load(r15 + 0x10)\nstore(r2, r3)\nr4 := load(r5 ^ r6)\nret");
        let ex = execute(&f, 11, &TracerConfig::default());
        for addr in ex.state.memory.initialized_bytes().keys() {
            assert!(ex.state.memory.is_mapped(*addr));
        }
        assert!(ex.state.memory.mapped_pages() >= 3);
    }
}
