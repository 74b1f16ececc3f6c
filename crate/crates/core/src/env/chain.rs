//! Minimal chain environment: click the goal words in order within `K` turns.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EnvError, Environment, Observation, StepOutcome};
use crate::vocab::{Vocabulary, TokenId, ATTRIBUTES, CLICK};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainEnv {
    task_id: String,
    prompt: String,
    goal: Vec<String>,
    max_turns: usize,
    progress: usize,
    turn: usize,
}

impl ChainEnv {
    pub fn new(task_id: impl Into<String>, goal: Vec<String>, max_turns: usize) -> Self {
        let prompt = format!("Click the words {} in order", goal.join(", "));
        Self {
            task_id: task_id.into(),
            prompt,
            goal,
            max_turns,
            progress: 0,
            turn: 0,
        }
    }

    pub fn generate(task_id: impl Into<String>, seed: u64, length: usize, max_turns: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = (0..length)
            .map(|_| ATTRIBUTES.choose(&mut rng).unwrap().to_string())
            .collect();
        Self::new(task_id, goal, max_turns)
    }

    fn observation(&self) -> Observation {
        let mut facts = vec![format!("chain:progress{}", self.progress)];
        if let Some(next) = self.goal.get(self.progress) {
            facts.push(format!("need:{next}"));
        }
        Observation {
            text: format!("'Progress {}/{}'", self.progress, self.goal.len()),
            state_key: format!("chain|{}", self.progress),
            admissible_actions: self.goal.iter().map(|w| format!("click[{w}]")).collect(),
            slot_targets: Vec::new(),
            facts,
        }
    }
}

impl Environment for ChainEnv {
    fn reset(&mut self) -> Observation {
        self.progress = 0;
        self.turn = 0;
        self.observation()
    }

    fn step(&mut self, command: &str) -> Result<StepOutcome, EnvError> {
        if self.turn >= self.max_turns || self.progress == self.goal.len() {
            return Err(EnvError::EpisodeFinished);
        }
        self.turn += 1;
        let expected = format!("click[{}]", self.goal[self.progress]);
        let hit = command.trim() == expected;
        if hit {
            self.progress += 1;
        }
        let solved = self.progress == self.goal.len();
        let done = solved || self.turn >= self.max_turns;
        let reward = if solved { 1.0 } else { 0.0 };
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done,
            invalid_action: !hit,
            task_score: done.then_some(reward),
        })
    }

    fn prompt(&self) -> &str {
        &self.prompt
    }

    fn task_id(&self) -> &str {
        &self.task_id
    }

    fn max_turns(&self) -> usize {
        self.max_turns
    }

    fn keywords(&self) -> Vec<TokenId> {
        let vocab = Vocabulary::get();
        self.goal.iter().filter_map(|w| vocab.id(w)).collect()
    }

    fn expert_command(&self, _rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let vocab = Vocabulary::get();
        match self.goal.get(self.progress) {
            Some(w) => vec![CLICK, vocab.id(w).unwrap()],
            None => vec![CLICK],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_in_goal_length_turns() {
        let mut env = ChainEnv::generate("c", 4, 3, 5);
        env.reset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = Vocabulary::get();
        for k in 0..3 {
            let cmd = vocab.render_command(&env.expert_command(&mut rng), &[]);
            let out = env.step(&cmd).unwrap();
            assert_eq!(out.done, k == 2);
        }
        assert_eq!(env.step("click[x]"), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn budget_ends_episode_with_zero() {
        let mut env = ChainEnv::generate("c", 4, 3, 2);
        env.reset();
        env.step("click[nothing]").unwrap();
        let out = env.step("click[nothing]").unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 0.0);
    }
}
