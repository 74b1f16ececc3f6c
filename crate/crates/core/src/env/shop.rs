//! Synthetic shopping environment with a sparse terminal reward.
//!
//! A task is a seeded catalog plus an instruction derived from one target
//! product. The agent searches, pages through results, opens a product,
//! picks option values and buys. Buying ends the episode with the
//! attribute/option/price match score of the bought product, scaled by a
//! category-match factor.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Observation, StepOutcome};
use crate::vocab::{
    TokenId, Vocabulary, ATTRIBUTES, BACK, BUY, CATEGORIES, CLICK, NEXT, OPTION_FIELDS, PREV,
    SEARCH, SLOT_BASE,
};

pub const PAGE_SIZE: usize = 10;
pub const MAX_RESULTS: usize = 50;

pub type OptionPair = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopProduct {
    pub id: String,
    pub title: String,
    pub category: String,
    pub attributes: BTreeSet<String>,
    /// Offered `(field, value)` pairs.
    pub options: BTreeSet<OptionPair>,
    pub price: f64,
}

impl ShopProduct {
    fn offers(&self, pair: &OptionPair) -> bool {
        self.options.contains(pair)
    }

    fn option_fields(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut fields: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (f, v) in &self.options {
            fields.entry(f.as_str()).or_default().push(v.as_str());
        }
        fields
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopInstruction {
    pub required_attributes: BTreeSet<String>,
    pub required_options: BTreeSet<OptionPair>,
    pub price_cap: f64,
    pub target_category: String,
}

impl ShopInstruction {
    /// Product satisfies category, attributes, price and offers every
    /// required option, so a perfect score is reachable from it.
    pub fn is_full_match(&self, p: &ShopProduct) -> bool {
        p.category == self.target_category
            && self.required_attributes.is_subset(&p.attributes)
            && p.price <= self.price_cap
            && self.required_options.iter().all(|o| p.offers(o))
    }
}

/// `r_type * (|U_att ∩ Y_att| + |U_opt ∩ chosen| + 1[price ok]) / (|U_att| + |U_opt| + 1)`.
pub fn shop_reward(
    selected: &ShopProduct,
    chosen_options: &BTreeSet<OptionPair>,
    instr: &ShopInstruction,
    r_mismatch: f64,
) -> f64 {
    let r_type = if selected.category == instr.target_category {
        1.0
    } else {
        r_mismatch
    };
    let att = instr
        .required_attributes
        .intersection(&selected.attributes)
        .count();
    let opt = instr.required_options.intersection(chosen_options).count();
    let price = usize::from(selected.price <= instr.price_cap);
    let denom = instr.required_attributes.len() + instr.required_options.len() + 1;
    r_type * (att + opt + price) as f64 / denom as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShopGenConfig {
    pub catalog_size: usize,
    pub min_attributes: usize,
    pub max_attributes: usize,
    pub max_option_fields: usize,
    pub min_price: f64,
    pub max_price: f64,
}

impl Default for ShopGenConfig {
    fn default() -> Self {
        Self {
            catalog_size: 50,
            min_attributes: 3,
            max_attributes: 6,
            max_option_fields: 3,
            min_price: 5.0,
            max_price: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTask {
    pub task_id: String,
    pub prompt: String,
    pub instruction: ShopInstruction,
    pub catalog: Vec<ShopProduct>,
    pub max_turns: usize,
    pub seed: u64,
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl EpisodeTask {
    /// Deterministic catalog and instruction for `seed`.
    pub fn generate(task_id: impl Into<String>, seed: u64, max_turns: usize, gen: &ShopGenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let catalog: Vec<ShopProduct> = (0..gen.catalog_size)
            .map(|i| {
                let category = CATEGORIES.choose(&mut rng).unwrap().to_string();
                let n_att = rng.random_range(gen.min_attributes..=gen.max_attributes.min(ATTRIBUTES.len()));
                let attributes: BTreeSet<String> = ATTRIBUTES
                    .choose_multiple(&mut rng, n_att)
                    .map(|s| s.to_string())
                    .collect();
                let n_fields = rng.random_range(1..=gen.max_option_fields.min(OPTION_FIELDS.len()));
                let mut options = BTreeSet::new();
                for (field, values) in OPTION_FIELDS.choose_multiple(&mut rng, n_fields) {
                    let n_vals = rng.random_range(2..=values.len());
                    for v in values.choose_multiple(&mut rng, n_vals) {
                        options.insert((field.to_string(), v.to_string()));
                    }
                }
                let price = cents(rng.random_range(gen.min_price..=gen.max_price));
                let lead: Vec<String> = attributes.iter().take(2).map(|a| title_case(a)).collect();
                ShopProduct {
                    id: format!("p{i:03}"),
                    title: format!("{} {}", lead.join(" "), title_case(&category)),
                    category,
                    attributes,
                    options,
                    price,
                }
            })
            .collect();

        let target = catalog.choose(&mut rng).unwrap().clone();
        let n_req = rng.random_range(1..=target.attributes.len().min(3));
        let attrs: Vec<&String> = target.attributes.iter().collect();
        let required_attributes: BTreeSet<String> =
            attrs.choose_multiple(&mut rng, n_req).map(|s| s.to_string()).collect();
        let fields = target.option_fields();
        let field_names: Vec<&str> = fields.keys().copied().collect();
        let n_opt = rng.random_range(0..=field_names.len().min(2));
        let required_options: BTreeSet<OptionPair> = field_names
            .choose_multiple(&mut rng, n_opt)
            .map(|f| {
                let v = fields[f].choose(&mut rng).unwrap();
                (f.to_string(), v.to_string())
            })
            .collect();
        let price_cap = cents(target.price + rng.random_range(1.0..20.0)).ceil();
        let instruction = ShopInstruction {
            required_attributes,
            required_options,
            price_cap,
            target_category: target.category.clone(),
        };
        let prompt = render_prompt(&instruction);
        Self {
            task_id: task_id.into(),
            prompt,
            instruction,
            catalog,
            max_turns,
            seed,
        }
    }

    /// Serialize to the task file format (pretty JSON).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn render_prompt(instr: &ShopInstruction) -> String {
    let attrs: Vec<&str> = instr.required_attributes.iter().map(String::as_str).collect();
    let mut s = format!("Find me {} {}", attrs.join(", "), instr.target_category);
    for (f, v) in &instr.required_options {
        s.push_str(&format!(", and {f}: {v}"));
    }
    s.push_str(&format!(", and price lower than {:.2} dollars", instr.price_cap));
    s
}

#[derive(Debug, Clone, PartialEq)]
enum View {
    Search,
    Results {
        query: Vec<String>,
        ranked: Vec<usize>,
        page: usize,
    },
    Item {
        query: Vec<String>,
        ranked: Vec<usize>,
        page: usize,
        product: usize,
        chosen: BTreeMap<String, String>,
    },
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShopRewardConfig {
    pub r_mismatch: f64,
}

impl Default for ShopRewardConfig {
    fn default() -> Self {
        Self { r_mismatch: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct ShopEnv {
    task: EpisodeTask,
    reward: ShopRewardConfig,
    view: View,
    turn: usize,
}

impl ShopEnv {
    pub fn new(task: EpisodeTask, reward: ShopRewardConfig) -> Self {
        Self {
            task,
            reward,
            view: View::Search,
            turn: 0,
        }
    }

    pub fn task(&self) -> &EpisodeTask {
        &self.task
    }

    fn rank(&self, query: &[String]) -> Vec<usize> {
        let score = |p: &ShopProduct| -> usize {
            query
                .iter()
                .map(|kw| {
                    if *kw == p.category {
                        2
                    } else if p.attributes.contains(kw) || p.options.iter().any(|(_, v)| v == kw) {
                        1
                    } else {
                        0
                    }
                })
                .sum()
        };
        let mut idx: Vec<usize> = (0..self.task.catalog.len()).collect();
        idx.sort_by_key(|&i| (std::cmp::Reverse(score(&self.task.catalog[i])), i));
        idx.truncate(MAX_RESULTS);
        idx
    }

    fn page_items(ranked: &[usize], page: usize) -> &[usize] {
        let start = (page - 1) * PAGE_SIZE;
        let end = (start + PAGE_SIZE).min(ranked.len());
        &ranked[start.min(end)..end]
    }

    fn n_pages(ranked: &[usize]) -> usize {
        ranked.len().div_ceil(PAGE_SIZE).max(1)
    }

    fn instruction_facts(&self, facts: &mut Vec<String>) {
        let instr = &self.task.instruction;
        facts.push(format!("wantcat:{}", instr.target_category));
        for a in &instr.required_attributes {
            facts.push(format!("want:{a}"));
        }
        for (_, v) in &instr.required_options {
            facts.push(format!("wantopt:{v}"));
        }
    }

    pub fn observation(&self) -> Observation {
        let instr = &self.task.instruction;
        let catalog = &self.task.catalog;
        let mut facts = Vec::new();
        let mut slot_targets = Vec::new();
        let mut admissible = Vec::new();
        let (text, state_key) = match &self.view {
            View::Search => {
                facts.push("view:search".into());
                admissible.push("search[<keywords>]".into());
                ("'Search'".to_string(), "search".to_string())
            }
            View::Results { query, ranked, page } => {
                facts.push("view:results".into());
                let n_pages = Self::n_pages(ranked);
                let mut parts = vec![
                    "'Back to Search'".to_string(),
                    format!("'Page {page} (Total results: {})'", ranked.len()),
                ];
                admissible.push("click[back to search]".into());
                if *page > 1 {
                    parts.push("'< Prev'".into());
                    admissible.push("click[< prev]".into());
                }
                if *page < n_pages {
                    parts.push("'Next >'".into());
                    admissible.push("click[next >]".into());
                    facts.push("has_next".into());
                }
                let mut any_match = false;
                for (slot, &i) in Self::page_items(ranked, *page).iter().enumerate() {
                    let p = &catalog[i];
                    parts.push(format!("'{}' [SEP] '{}' [SEP] '${:.2}'", p.id, p.title, p.price));
                    admissible.push(format!("click[{}]", p.id));
                    slot_targets.push(p.id.clone());
                    if instr.is_full_match(p) {
                        facts.push(format!("slot{slot}:match"));
                        any_match = true;
                    } else if p.category == instr.target_category {
                        facts.push(format!("slot{slot}:cat"));
                    }
                }
                if !any_match {
                    facts.push("page:nomatch".into());
                }
                (
                    parts.join(" [SEP] "),
                    format!("results|q={}|page={page}", query.join(" ")),
                )
            }
            View::Item {
                query,
                page,
                product,
                chosen,
                ..
            } => {
                facts.push("view:item".into());
                let p = &catalog[*product];
                let mut parts = vec!["'Back to Search'".to_string(), "'< Prev'".to_string()];
                admissible.push("click[back to search]".into());
                admissible.push("click[< prev]".into());
                for (field, values) in p.option_fields() {
                    parts.push(format!("'{field}'"));
                    for v in values {
                        let mark = if chosen.get(field).map(String::as_str) == Some(v) { "*" } else { "" };
                        parts.push(format!("'{v}{mark}'"));
                        admissible.push(format!("click[{v}]"));
                    }
                }
                parts.push(format!("'{}'", p.title));
                parts.push(format!("'Price: ${:.2}'", p.price));
                let attrs: Vec<&str> = p.attributes.iter().map(String::as_str).collect();
                parts.push(format!("'Attributes: {}'", attrs.join(", ")));
                parts.push("'Buy Now'".into());
                admissible.push("click[buy]".into());
                if instr.is_full_match(p) {
                    facts.push("item:match".into());
                    let mut done = true;
                    for (f, v) in &instr.required_options {
                        if chosen.get(f) != Some(v) {
                            facts.push(format!("need:{v}"));
                            done = false;
                        }
                    }
                    if done {
                        facts.push("opts:done".into());
                    }
                } else {
                    facts.push("item:nomatch".into());
                }
                let chosen_key: Vec<String> = chosen.iter().map(|(f, v)| format!("{f}:{v}")).collect();
                (
                    parts.join(" [SEP] "),
                    format!(
                        "item|{}|{}|q={}|page={page}",
                        p.id,
                        chosen_key.join(","),
                        query.join(" ")
                    ),
                )
            }
            View::Done => {
                facts.push("view:done".into());
                ("'Thank you for shopping'".to_string(), "done".to_string())
            }
        };
        self.instruction_facts(&mut facts);
        Observation {
            text,
            state_key,
            admissible_actions: admissible,
            slot_targets,
            facts,
        }
    }

    fn parse_command(command: &str) -> Option<(&str, &str)> {
        let command = command.trim();
        let open = command.find('[')?;
        if !command.ends_with(']') {
            return None;
        }
        let verb = &command[..open];
        let arg = command[open + 1..command.len() - 1].trim();
        Some((verb, arg))
    }

    /// Apply `command` to the current view. Returns `(terminal score, valid)`.
    fn transition(&mut self, command: &str) -> (Option<f64>, bool) {
        let Some((verb, arg)) = Self::parse_command(command) else {
            return (None, false);
        };
        let view = std::mem::replace(&mut self.view, View::Done);
        let (next, score, valid) = match (view, verb) {
            (View::Search, "search") => {
                let query: Vec<String> = arg.split_whitespace().map(String::from).collect();
                if query.is_empty() {
                    (View::Search, None, false)
                } else {
                    let ranked = self.rank(&query);
                    (View::Results { query, ranked, page: 1 }, None, true)
                }
            }
            (View::Results { query, ranked, page }, "click") => match arg {
                "back to search" => (View::Search, None, true),
                "next >" if page < Self::n_pages(&ranked) => {
                    (View::Results { query, ranked, page: page + 1 }, None, true)
                }
                "< prev" if page > 1 => (View::Results { query, ranked, page: page - 1 }, None, true),
                id => {
                    let hit = Self::page_items(&ranked, page)
                        .iter()
                        .copied()
                        .find(|&i| self.task.catalog[i].id == id);
                    match hit {
                        Some(product) => (
                            View::Item {
                                query,
                                ranked,
                                page,
                                product,
                                chosen: BTreeMap::new(),
                            },
                            None,
                            true,
                        ),
                        None => (View::Results { query, ranked, page }, None, false),
                    }
                }
            },
            (
                View::Item {
                    query,
                    ranked,
                    page,
                    product,
                    mut chosen,
                },
                "click",
            ) => match arg {
                "back to search" => (View::Search, None, true),
                "< prev" => (View::Results { query, ranked, page }, None, true),
                "buy" => {
                    let p = &self.task.catalog[product];
                    let chosen_set: BTreeSet<OptionPair> = chosen.into_iter().collect();
                    let r = shop_reward(p, &chosen_set, &self.task.instruction, self.reward.r_mismatch);
                    (View::Done, Some(r), true)
                }
                value => {
                    let p = &self.task.catalog[product];
                    match p.options.iter().find(|(_, v)| v == value) {
                        Some((f, v)) => {
                            chosen.insert(f.clone(), v.clone());
                            (
                                View::Item {
                                    query,
                                    ranked,
                                    page,
                                    product,
                                    chosen,
                                },
                                None,
                                true,
                            )
                        }
                        None => (
                            View::Item {
                                query,
                                ranked,
                                page,
                                product,
                                chosen,
                            },
                            None,
                            false,
                        ),
                    }
                }
            },
            (other, _) => (other, None, false),
        };
        self.view = next;
        (score, valid)
    }

    /// Command tokens a competent shopper would emit here.
    fn expert_tokens(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let vocab = Vocabulary::get();
        let instr = &self.task.instruction;
        match &self.view {
            View::Search | View::Done => {
                let mut kws = vec![vocab.id(&instr.target_category).unwrap()];
                let mut attrs: Vec<TokenId> = instr
                    .required_attributes
                    .iter()
                    .map(|a| vocab.id(a).unwrap())
                    .collect();
                attrs.shuffle(rng);
                kws.extend(attrs);
                let mut out = vec![SEARCH];
                out.extend(kws);
                out
            }
            View::Results { ranked, page, .. } => {
                let items = Self::page_items(ranked, *page);
                match items
                    .iter()
                    .position(|&i| instr.is_full_match(&self.task.catalog[i]))
                {
                    Some(slot) => vec![CLICK, SLOT_BASE + slot],
                    None if *page < Self::n_pages(ranked) => vec![CLICK, NEXT],
                    None => vec![CLICK, BACK],
                }
            }
            View::Item { product, chosen, .. } => {
                let p = &self.task.catalog[*product];
                if !instr.is_full_match(p) {
                    return vec![CLICK, PREV];
                }
                match instr.required_options.iter().find(|(f, v)| chosen.get(f) != Some(v)) {
                    Some((_, v)) => vec![CLICK, vocab.id(v).unwrap()],
                    None => vec![CLICK, BUY],
                }
            }
        }
    }
}

impl Environment for ShopEnv {
    fn reset(&mut self) -> Observation {
        self.view = View::Search;
        self.turn = 0;
        self.observation()
    }

    fn step(&mut self, command: &str) -> Result<StepOutcome, EnvError> {
        if self.turn >= self.task.max_turns || self.view == View::Done {
            return Err(EnvError::EpisodeFinished);
        }
        self.turn += 1;
        let (score, valid) = self.transition(command);
        let done = score.is_some() || self.turn >= self.task.max_turns;
        Ok(StepOutcome {
            observation: self.observation(),
            reward: score.unwrap_or(0.0),
            done,
            invalid_action: !valid,
            task_score: done.then_some(score.unwrap_or(0.0)),
        })
    }

    fn prompt(&self) -> &str {
        &self.task.prompt
    }

    fn task_id(&self) -> &str {
        &self.task.task_id
    }

    fn max_turns(&self) -> usize {
        self.task.max_turns
    }

    fn keywords(&self) -> Vec<TokenId> {
        let vocab = Vocabulary::get();
        let instr = &self.task.instruction;
        std::iter::once(instr.target_category.as_str())
            .chain(instr.required_attributes.iter().map(String::as_str))
            .filter_map(|w| vocab.id(w))
            .collect()
    }

    fn expert_command(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        self.expert_tokens(rng)
    }
}
