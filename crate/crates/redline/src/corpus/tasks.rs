//! Built-in task registry: every classification task ships with its label
//! inventory and instruction sentence so CLI runs and tests agree on them.

use super::{InputArity, LabelSet, TaskSpec};

/// Edit intent classification over old/new sentence pairs.
pub fn edit_intent() -> TaskSpec {
    TaskSpec::new(
        "eic",
        InputArity::Pair,
        LabelSet::edit_intents(),
        "Classify the intent of the following sentence edit. The possible labels are: \
         Grammar, Clarity, Fact/Evidence, Claim, Other.",
    )
    .expect("built-in task is valid")
}

/// Revision alignment: does the new sentence revise the old one?
/// The positive class comes first (see [`LabelSet::positive`]).
pub fn revision_alignment() -> TaskSpec {
    TaskSpec::new(
        "ra",
        InputArity::Pair,
        LabelSet::new(["aligned", "distinct"]).unwrap(),
        "Classify whether the new sentence is a revision of the old sentence. \
         The possible labels are: aligned, distinct.",
    )
    .expect("built-in task is valid")
}

/// Duplicate-question detection over question pairs.
pub fn duplicate_questions() -> TaskSpec {
    TaskSpec::new(
        "sdq",
        InputArity::Pair,
        LabelSet::new(["duplicate", "different"]).unwrap(),
        "Decide if the two questions ask the same thing. The possible labels are: \
         duplicate, different.",
    )
    .expect("built-in task is valid")
}

/// Sentence-pair paraphrase detection (news sentences).
pub fn sentence_equivalence() -> TaskSpec {
    TaskSpec::new(
        "tse",
        InputArity::Pair,
        LabelSet::new(["paraphrase", "unrelated"]).unwrap(),
        "Decide if the two sentences express the same meaning. The possible labels are: \
         paraphrase, unrelated.",
    )
    .expect("built-in task is valid")
}

/// URL-sharing tweet-pair equivalence.
pub fn tweet_url_equivalence() -> TaskSpec {
    TaskSpec::new(
        "tuc",
        InputArity::Pair,
        LabelSet::new(["paraphrase", "unrelated"]).unwrap(),
        "Decide if the two tweets express the same meaning. The possible labels are: \
         paraphrase, unrelated.",
    )
    .expect("built-in task is valid")
}

/// Six-way emotion classification of single texts.
pub fn emotion() -> TaskSpec {
    TaskSpec::new(
        "ec",
        InputArity::Single,
        LabelSet::new(["anger", "fear", "joy", "love", "sadness", "surprise"]).unwrap(),
        "Classify the emotion of the following text. The possible labels are: \
         anger, fear, joy, love, sadness, surprise.",
    )
    .expect("built-in task is valid")
}

/// Three-way tweet sentiment classification.
pub fn tweet_sentiment() -> TaskSpec {
    TaskSpec::new(
        "tsec",
        InputArity::Single,
        LabelSet::new(["neutral", "positive", "negative"]).unwrap(),
        "Classify the sentiment of the following text. The possible labels are: \
         neutral, positive, negative.",
    )
    .expect("built-in task is valid")
}

/// All built-in tasks.
pub fn builtin() -> Vec<TaskSpec> {
    vec![
        edit_intent(),
        revision_alignment(),
        duplicate_questions(),
        sentence_equivalence(),
        tweet_url_equivalence(),
        emotion(),
        tweet_sentiment(),
    ]
}

/// Looks up a built-in task by id.
pub fn by_id(task_id: &str) -> Option<TaskSpec> {
    builtin().into_iter().find(|t| t.task_id == task_id)
}
