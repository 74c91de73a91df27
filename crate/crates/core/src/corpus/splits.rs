use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{all_triples, action_phrases, location_phrases, object_phrases, pattern_count, realize, IntentGrammar};
use super::speaker::{generate_speakers, SpeakerProfile};
use super::synth::{synthesize_utterance, Utterance};
use crate::error::{Result, SluError};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Seen speakers, half seen and half held-out phrasings; used for tuning.
    Dev,
    TestSeen,
    TestUnseenPhrasing,
    TestUnseenSpeaker,
}

impl Split {
    pub const ALL: [Split; 5] =
        [Split::Train, Split::Dev, Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::TestSeen => "test_seen",
            Split::TestUnseenPhrasing => "test_unseen_phrasing",
            Split::TestUnseenSpeaker => "test_unseen_speaker",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = SluError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| SluError::invalid(format!("unknown split `{s}`")))
    }
}

/// Utterance ids per split plus the unlabeled text pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen_phrasing: Vec<String>,
    pub test_unseen_speaker: Vec<String>,
    pub unlabeled_text: Vec<Vec<String>>,
}

impl CorpusSplits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseenPhrasing => &self.test_unseen_phrasing,
            Split::TestUnseenSpeaker => &self.test_unseen_speaker,
        }
    }

    pub fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::TestSeen => &mut self.test_seen,
            Split::TestUnseenPhrasing => &mut self.test_unseen_phrasing,
            Split::TestUnseenSpeaker => &mut self.test_unseen_speaker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test_each: usize,
    pub n_dev: usize,
    pub n_speakers: usize,
    pub n_heldout_speakers: usize,
    pub noise_level: f64,
    /// Random realizations added to the unlabeled pool on top of every template.
    pub n_unlabeled: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 2400,
            n_test_each: 300,
            n_dev: 300,
            n_speakers: 24,
            n_heldout_speakers: 6,
            noise_level: 0.5,
            n_unlabeled: 6000,
        }
    }
}

/// A generated corpus: speakers, utterances keyed by id, and the splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub grammar: IntentGrammar,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: BTreeMap<String, Utterance>,
    pub splits: CorpusSplits,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.splits.ids(split).iter().filter_map(|id| self.utterances.get(id)).collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.splits.ids(s).iter().any(|x| x == id))
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }
}

/// Splits with default noise, a dev split the size of each test split, and the
/// default unlabeled pool size.
pub fn make_splits(
    grammar: &IntentGrammar,
    n_train: usize,
    n_test_each: usize,
    n_speakers: usize,
    n_heldout_speakers: usize,
    seed: u64,
) -> Result<Corpus> {
    let config = CorpusConfig {
        n_train,
        n_test_each,
        n_dev: n_test_each,
        n_speakers,
        n_heldout_speakers,
        ..CorpusConfig::default()
    };
    generate_corpus(grammar, &config, seed)
}

pub fn generate_corpus(grammar: &IntentGrammar, config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if config.n_train == 0 || config.n_test_each == 0 || config.n_speakers == 0 {
        return Err(SluError::invalid("utterance and speaker counts must be positive"));
    }
    if config.n_heldout_speakers == 0 || config.n_heldout_speakers >= config.n_speakers {
        return Err(SluError::invalid(format!(
            "need 0 < held-out speakers < speakers, got {} of {}",
            config.n_heldout_speakers, config.n_speakers
        )));
    }
    for i in 0..grammar.intents.len() {
        if grammar.training_templates(i).count() == 0 || grammar.held_out_templates(i).count() == 0 {
            return Err(SluError::invalid(format!("intent {} lacks templates for every split", grammar.intents[i].label)));
        }
    }

    let speakers = generate_speakers(seed, config.n_speakers, grammar.feat_dim());
    let n_seen = config.n_speakers - config.n_heldout_speakers;
    let (seen, unseen) = speakers.split_at(n_seen);
    let train_templates: Vec<Vec<usize>> = (0..grammar.intents.len())
        .map(|i| grammar.training_templates(i).map(|t| t.id).collect())
        .collect();
    let held_templates: Vec<Vec<usize>> = (0..grammar.intents.len())
        .map(|i| grammar.held_out_templates(i).map(|t| t.id).collect())
        .collect();

    let mut rng = substream(seed, "corpus");
    let mut utterances = BTreeMap::new();
    let mut splits = CorpusSplits::default();
    let plan: [(Split, usize); 5] = [
        (Split::Train, config.n_train),
        (Split::Dev, config.n_dev),
        (Split::TestSeen, config.n_test_each),
        (Split::TestUnseenPhrasing, config.n_test_each),
        (Split::TestUnseenSpeaker, config.n_test_each),
    ];
    for (split, count) in plan {
        // Intents cycle through a shuffled order so every split is balanced.
        let mut order: Vec<usize> = Vec::new();
        for k in 0..count {
            if k % grammar.intents.len() == 0 {
                order = (0..grammar.intents.len()).collect();
                order.shuffle(&mut rng);
            }
            let intent = order[k % grammar.intents.len()];
            let held = match split {
                Split::TestUnseenPhrasing => true,
                Split::Dev => k % 2 == 1,
                _ => false,
            };
            let pool = if held { &held_templates[intent] } else { &train_templates[intent] };
            let template = *pool.choose(&mut rng).expect("checked non-empty");
            let speaker = if split == Split::TestUnseenSpeaker {
                unseen.choose(&mut rng)
            } else {
                seen.choose(&mut rng)
            }
            .expect("checked non-empty");
            let utt_seed: u64 = rng.random();
            let mut u = synthesize_utterance(grammar, template, speaker, config.noise_level, utt_seed)?;
            u.id = format!("{}-{k:05}", split.as_str());
            splits.ids_mut(split).push(u.id.clone());
            utterances.insert(u.id.clone(), u);
        }
    }
    splits.unlabeled_text = unlabeled_text(grammar, config.n_unlabeled, &mut substream(seed, "unlabeled"));
    Ok(Corpus { grammar: grammar.clone(), speakers, utterances, splits })
}

/// Every template once, then random realizations over the full slot inventory.
fn unlabeled_text<R: Rng>(grammar: &IntentGrammar, n_random: usize, rng: &mut R) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = grammar.templates.iter().map(|t| t.words.clone()).collect();
    let triples = all_triples();
    for _ in 0..n_random {
        let (a, o, l) = triples.choose(rng).expect("inventory is non-empty");
        let pattern = rng.random_range(0..pattern_count());
        let act = action_phrases(a).choose(rng).expect("actions have phrases");
        let obj = object_phrases(o).choose(rng).expect("objects have phrases");
        let loc = location_phrases(l).choose(rng).copied();
        out.push(realize(pattern, act, obj, loc));
    }
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::grammar::build_grammar;
    use std::collections::BTreeSet;

    fn small() -> Corpus {
        let g = build_grammar(1, 31, 8).unwrap();
        let cfg = CorpusConfig { n_train: 120, n_test_each: 40, n_dev: 40, n_unlabeled: 50, ..Default::default() };
        generate_corpus(&g, &cfg, 1).unwrap()
    }

    fn templates(c: &Corpus, s: Split) -> BTreeSet<usize> {
        c.split(s).iter().map(|u| u.template_id).collect()
    }

    fn speakers(c: &Corpus, s: Split) -> BTreeSet<String> {
        c.split(s).iter().map(|u| u.speaker_id.clone()).collect()
    }

    #[test]
    fn counts_match_request() {
        let c = small();
        assert_eq!(c.splits.train.len(), 120);
        assert_eq!(c.splits.dev.len(), 40);
        for s in [Split::TestSeen, Split::TestUnseenPhrasing, Split::TestUnseenSpeaker] {
            assert_eq!(c.splits.ids(s).len(), 40);
        }
        assert_eq!(c.utterances.len(), 120 + 4 * 40);
    }

    #[test]
    fn splits_are_disjoint_where_required() {
        let c = small();
        assert!(templates(&c, Split::Train).is_disjoint(&templates(&c, Split::TestUnseenPhrasing)));
        assert!(speakers(&c, Split::Train).is_disjoint(&speakers(&c, Split::TestUnseenSpeaker)));
        assert!(c.split(Split::TestUnseenPhrasing).iter().all(|u| c.grammar.templates[u.template_id].held_out));
        assert!(c.split(Split::Train).iter().all(|u| !c.grammar.templates[u.template_id].held_out));
    }

    #[test]
    fn unlabeled_pool_contains_every_held_out_template() {
        let c = small();
        let pool: BTreeSet<&Vec<String>> = c.splits.unlabeled_text.iter().collect();
        for t in c.grammar.templates.iter().filter(|t| t.held_out) {
            assert!(pool.contains(&t.words), "missing {:?}", t.words);
        }
    }

    #[test]
    fn infeasible_requests_fail() {
        let g = build_grammar(1, 31, 8).unwrap();
        assert!(make_splits(&g, 10, 10, 4, 4, 0).is_err());
        assert!(make_splits(&g, 10, 10, 4, 0, 0).is_err());
        assert!(make_splits(&g, 0, 10, 4, 1, 0).is_err());
    }

    #[test]
    fn deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
    }
}
