//! Instruction vocabulary, object types and the synonym table.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const THE: u32 = 1;
pub const AND: u32 = 2;
pub const IT: u32 = 3;
pub const IN: u32 = 4;
pub const INTO: u32 = 5;

pub const PICK: u32 = 8;
pub const PLACE: u32 = 9;
pub const POUR: u32 = 10;
pub const WATER: u32 = 11;
pub const APPLE: u32 = 12;
pub const CUP: u32 = 13;
pub const BLOCK: u32 = 14;
pub const BASKET: u32 = 15;
pub const BOWL: u32 = 16;
pub const BOTTLE: u32 = 17;
pub const DUCK: u32 = 18;

/// Content tokens that own synonyms, in the order their synonym ids are
/// allocated.
pub const CONTENT_TOKENS: [u32; 9] = [PICK, PLACE, POUR, WATER, APPLE, CUP, BLOCK, BASKET, BOWL];
pub const SYNONYMS_PER_TOKEN: u32 = 2;
pub const FIRST_SYNONYM_ID: u32 = 32;

/// Object type ids.
pub const TYPE_APPLE: u32 = 0;
pub const TYPE_CUP: u32 = 1;
pub const TYPE_BLOCK: u32 = 2;
pub const TYPE_BOTTLE: u32 = 3;
pub const TYPE_DUCK: u32 = 4;
pub const N_TYPES: usize = 5;
/// Width of the type channel in cell descriptors.
pub const TYPE_DIM: usize = 4;
pub const TRAINING_TYPES: [u32; 3] = [TYPE_APPLE, TYPE_CUP, TYPE_BLOCK];
/// Held-out types and the trained type each is generated next to.
pub const NOVEL_TYPES: [(u32, u32); 2] = [(TYPE_BOTTLE, TYPE_APPLE), (TYPE_DUCK, TYPE_APPLE)];

pub fn type_token(type_id: u32) -> u32 {
    match type_id {
        TYPE_APPLE => APPLE,
        TYPE_CUP => CUP,
        TYPE_BLOCK => BLOCK,
        TYPE_BOTTLE => BOTTLE,
        TYPE_DUCK => DUCK,
        other => panic!("unknown object type {other}"),
    }
}

/// Tokens whose embeddings are built as perturbations of another token:
/// `(derived, base)`. Covers synonyms and novel-object names.
pub fn derived_tokens() -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = SynonymTable::standard()
        .map
        .iter()
        .flat_map(|(base, syns)| syns.iter().map(move |s| (*s, *base)))
        .collect();
    out.push((BOTTLE, APPLE));
    out.push((DUCK, APPLE));
    out.sort_unstable();
    out
}

/// Base token id → synonym ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    pub map: BTreeMap<u32, Vec<u32>>,
}

impl SynonymTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every content token gets `SYNONYMS_PER_TOKEN` consecutive ids from
    /// `FIRST_SYNONYM_ID` upwards.
    pub fn standard() -> Self {
        let mut map = BTreeMap::new();
        for (i, tok) in CONTENT_TOKENS.iter().enumerate() {
            let first = FIRST_SYNONYM_ID + i as u32 * SYNONYMS_PER_TOKEN;
            map.insert(*tok, (first..first + SYNONYMS_PER_TOKEN).collect());
        }
        Self { map }
    }

    pub fn max_id(&self) -> u32 {
        self.map.values().flatten().copied().max().unwrap_or(0)
    }
}

/// Replaces every content token by a seeded choice among its synonyms.
/// Tokens without an entry pass through unchanged.
pub fn rephrase_instruction(instr: &[u32], table: &SynonymTable, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    instr
        .iter()
        .map(|tok| match table.map.get(tok) {
            Some(syns) if !syns.is_empty() => *syns.choose(&mut rng).expect("non-empty"),
            _ => *tok,
        })
        .collect()
}
