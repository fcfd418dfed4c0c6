//! Fixed whitespace tokenizer over a 128-symbol vocabulary.
//!
//! Layout: `<pad>`, `<unk>`, the five chat delimiters, the role words
//! `system`/`user`/`assistant`, rule tokens `R0`..`R15`, then content words
//! `w0`..`w101`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::span::{END_HEADER, EOT, IM_END, IM_START, START_HEADER};

pub const N_RULES: usize = 16;
pub const N_CONTENT: usize = 102;

#[derive(Clone, Debug)]
pub struct ToyTokenizer {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyTokenizer {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const IM_START: u32 = 2;
    pub const IM_END: u32 = 3;
    pub const START_HEADER: u32 = 4;
    pub const END_HEADER: u32 = 5;
    pub const EOT: u32 = 6;
    pub const SYSTEM: u32 = 7;
    pub const USER: u32 = 8;
    pub const ASSISTANT: u32 = 9;
    const RULE_BASE: u32 = 10;
    const CONTENT_BASE: u32 = Self::RULE_BASE + N_RULES as u32;

    pub fn new() -> Self {
        let mut symbols: Vec<String> = ["<pad>", "<unk>", IM_START, IM_END, START_HEADER, END_HEADER, EOT]
            .iter()
            .chain(&["system", "user", "assistant"])
            .map(|s| s.to_string())
            .collect();
        symbols.extend((0..N_RULES).map(|k| format!("R{k}")));
        symbols.extend((0..N_CONTENT).map(|k| format!("w{k}")));
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Self { symbols, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> &str {
        self.symbols.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn rule(&self, k: usize) -> u32 {
        assert!(k < N_RULES, "rule index {k} out of range");
        Self::RULE_BASE + k as u32
    }

    /// Index `k` of rule token `R{k}`.
    pub fn rule_index(&self, id: u32) -> Option<usize> {
        (Self::RULE_BASE..Self::CONTENT_BASE)
            .contains(&id)
            .then(|| (id - Self::RULE_BASE) as usize)
    }

    pub fn content(&self, k: usize) -> u32 {
        assert!(k < N_CONTENT, "content index {k} out of range");
        Self::CONTENT_BASE + k as u32
    }

    pub fn is_content(&self, id: u32) -> bool {
        (Self::CONTENT_BASE..Self::CONTENT_BASE + N_CONTENT as u32).contains(&id)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.tokens(ids).join(" ")
    }

    pub fn tokens(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }
}
