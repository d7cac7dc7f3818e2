//! A small sequence-generation task for exercising GRPO with rule-based
//! rewards: emit a filled supervision-decision line such as
//! `申请人：张三；法院：北京；第5条。` from a 32-token vocabulary that also
//! contains mojibake tokens and spans copied from the input document.

use std::sync::Arc;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::grpo::{train_grpo, GrpoConfig, GrpoError, GrpoLog};
use crate::policy::{ToyPolicy, TokenId, Vocab};
use crate::rewards::{
    combined_reward, duplication_penalty, format_reward, garbled_penalty, AmountTask, FormatSpec, RewardConfig,
    RewardWeights,
};
use crate::seeds::derive_seed;

pub const BANDIT_TEMPLATE: &str = "申请人：[applicant]；法院：[court]；第[article]条。";
pub const BANDIT_MAX_LEN: usize = 12;

const SOURCE_DOCUMENT: &str = "经审理查明，被告人于二〇二一年三月在本市某小区内盗窃电动自行车一辆，\
    案发后被告人如实供述自己的罪行并退赔被害人全部损失，本院认为被告人的行为已构成盗窃罪，应依法惩处。";

const FORMAT_TOKENS: [&str; 4] = ["申请人：", "；法院：", "；第", "条。"];
const VALUE_TOKENS: [&str; 17] = [
    "张三", "李四", "王五", "赵六", "北京", "上海", "广州", "深圳", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];
const GARBLED_TOKENS: [&str; 2] = ["\u{FFFD}", "Ã©"];
const FILLER_TOKENS: [&str; 5] = ["的", "了", "元", "年", "月"];
/// Each copy token alone stays under the duplication threshold; the two
/// adjacent halves together exceed it.
const COPY_CHARS: usize = 17;

pub struct FormatBandit {
    vocab: Arc<Vocab>,
    spec: FormatSpec,
    task: AmountTask,
    reward_cfg: RewardConfig,
    input: String,
}

impl Default for FormatBandit {
    fn default() -> Self {
        Self::new()
    }
}

impl FormatBandit {
    pub fn new() -> Self {
        let input: String = SOURCE_DOCUMENT.split_whitespace().collect();
        let chars: Vec<char> = input.chars().collect();
        let copied: Vec<String> = [0usize, COPY_CHARS]
            .iter()
            .map(|&s| chars[s..s + COPY_CHARS].iter().collect())
            .collect();
        let symbols = FORMAT_TOKENS
            .iter()
            .chain(&VALUE_TOKENS)
            .chain(&GARBLED_TOKENS)
            .map(|s| s.to_string())
            .chain(copied)
            .chain(FILLER_TOKENS.iter().map(|s| s.to_string()));
        let vocab = Arc::new(Vocab::with_markers(symbols).expect("bandit vocabulary is valid"));
        let mut patterns = IndexMap::new();
        patterns.insert("applicant".to_string(), "张三|李四|王五|赵六".to_string());
        patterns.insert("court".to_string(), "北京|上海|广州|深圳".to_string());
        patterns.insert("article".to_string(), "[1-9]+".to_string());
        let spec = FormatSpec::new(
            BANDIT_TEMPLATE,
            vec!["applicant".into(), "court".into(), "article".into()],
            patterns,
        )
        .expect("bandit template is valid");
        let reward_cfg = RewardConfig {
            weights: RewardWeights {
                process: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        Self {
            vocab,
            spec,
            task: AmountTask::default(),
            reward_cfg,
            input,
        }
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn spec(&self) -> &FormatSpec {
        &self.spec
    }

    pub fn input(&self) -> &str {
        &self.input
    }

    pub fn query(&self) -> Vec<TokenId> {
        vec![self.vocab.bos()]
    }

    pub fn reward(&self, tokens: &[TokenId]) -> f64 {
        let text = self.vocab.decode(tokens);
        combined_reward(&text, &self.input, &self.spec, &self.task, &self.reward_cfg).total()
    }

    /// Full template conformance with no mojibake and no copied span.
    pub fn is_valid(&self, tokens: &[TokenId]) -> bool {
        let text = self.vocab.decode(tokens);
        format_reward(&text, &self.spec) == 1.0
            && garbled_penalty(&text, 1.0) == 0.0
            && duplication_penalty(&text, &self.input, 1.0) == 0.0
    }

    /// Monte-Carlo estimate of the probability mass on valid outputs.
    pub fn valid_mass(&self, policy: &ToyPolicy, samples: usize, seed: u64) -> f64 {
        let q = self.query();
        let hits = (0..samples)
            .into_par_iter()
            .filter(|&i| {
                let s = policy.sample_seeded(&q, BANDIT_MAX_LEN, derive_seed(seed, &[i as u64]));
                self.is_valid(&s.tokens)
            })
            .count();
        hits as f64 / samples as f64
    }

    pub fn train(&self, init: &ToyPolicy, cfg: &GrpoConfig) -> Result<(ToyPolicy, GrpoLog), GrpoError> {
        let reward = |_: &[TokenId], o: &[TokenId]| self.reward(o);
        train_grpo(init, &[self.query()], &reward, cfg)
    }
}
