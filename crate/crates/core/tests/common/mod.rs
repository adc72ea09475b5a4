#![allow(dead_code)]

pub mod encoding;
pub mod oracle;
