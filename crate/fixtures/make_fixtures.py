"""Regenerates the synthetic fixture corpus, lexicons and substitution table."""

import json
import random
from pathlib import Path

HERE = Path(__file__).parent

LEXICONS = {
    "fear": ["afraid", "scared", "terrified", "dread", "panic", "frightened", "nervous", "horror"],
    "joy": ["happy", "joyful", "delighted", "cheerful", "glad", "elated", "thrilled", "sunny"],
    "sadness": ["sad", "gloomy", "tearful", "lonely", "grief", "sorrow", "mournful", "weary"],
    "love": ["love", "adore", "cherish", "affection", "devoted", "tender", "darling", "beloved"],
    "romance": ["romantic", "candlelit", "moonlit", "courtship", "darling", "beloved", "tender", "kiss"],
    "humor": ["funny", "hilarious", "joke", "silly", "laugh", "witty", "comic", "goofy"],
    "casual": ["hey", "gonna", "yeah", "chill", "kinda", "stuff", "cool", "okay"],
    "knowledge": ["research", "theory", "data", "evidence", "science", "history", "analysis", "fact"],
    "polite": ["please", "thanks", "kindly", "grateful", "respectfully", "pardon", "sir", "madam"],
    "nontoxic": ["kind", "gentle", "calm", "fair", "helpful", "caring", "peaceful", "warm"],
}

FILLERS = ["really", "very", "just", "quite", "simply", "rather", "somewhat", "truly", "so", "then"]

SUBJECTS = ["We", "She", "He", "They", "The group", "My friend", "The old man", "The team"]
VERBS = ["walked to", "looked at", "talked about", "found", "visited", "painted", "cleaned", "opened"]
OBJECTS = ["the house", "a garden", "the market", "the river", "a letter", "the station", "a small boat", "the library"]


def sentence(rng, extra_words):
    words = [rng.choice(SUBJECTS)]
    words += [rng.choice(FILLERS), rng.choice(VERBS), rng.choice(OBJECTS)]
    tail = ["and", rng.choice(FILLERS), rng.choice(FILLERS), "stayed", "there", rng.choice(FILLERS), "long"]
    words += tail
    for w in extra_words:
        words.insert(rng.randrange(1, len(words)), w)
    text = " ".join(words)
    return text + "."


def text(rng):
    n_sent = rng.choice([3, 4])
    attribute_words = []
    for dim, terms in LEXICONS.items():
        k = rng.choice([0, 0, 1, 1, 2]) if dim in ("fear", "joy", "sadness", "humor") else rng.choice([0, 0, 0, 1])
        attribute_words += rng.sample(terms, k)
    rng.shuffle(attribute_words)
    chunks = [[] for _ in range(n_sent)]
    for i, w in enumerate(attribute_words):
        chunks[i % n_sent].append(w)
    return " ".join(sentence(rng, c) for c in chunks)


def main():
    rng = random.Random(20240611)
    for dim, terms in LEXICONS.items():
        (HERE / "lexicons" / f"{dim}.tsv").write_text("".join(f"{t}\t1.0\n" for t in terms))
    entries = {}
    shared = set(LEXICONS["love"]) & set(LEXICONS["romance"])
    for dim, terms in LEXICONS.items():
        insert = [t for t in terms if t not in shared] if dim not in ("love", "romance") else terms[:6]
        entries[dim] = {"insert": insert, "remove": terms}
    table = {"entries": entries, "fillers": FILLERS}
    (HERE / "substitutions.json").write_text(json.dumps(table, indent=2) + "\n")
    corpus = [text(rng) for _ in range(50)]
    (HERE / "corpora" / "stories.txt").write_text("\n".join(corpus) + "\n")


if __name__ == "__main__":
    main()
