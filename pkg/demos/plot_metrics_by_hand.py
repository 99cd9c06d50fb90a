"""
Story metrics on hand-made examples
===================================

Coherence counts how far the main characters travel through a story;
consistency counts how many of an entity's verbs and adjectives belong to it
alone.  Small stories make both easy to check by eye.
"""

from mneme import AnnotatedNarrative, EntityMentionIndex, EntityPrompt, consistency_U, consistency_V, match_gold
from mneme.metrics import coherence_avg_sections, coherence_max_span, protagonists

# Ten one-word sentences, so section k is sentence k.  Ann appears in
# sections 2 and 7, Bo only in section 4.
words = ["x"] * 10
words[2], words[4], words[7] = "Ann", "Bo", "Ann"
story = AnnotatedNarrative("ten", words, list(range(10)), [(0, 2, 3), (1, 4, 5), (0, 7, 8)], ["NOUN"] * 10)
index = EntityMentionIndex.from_narrative(story)
print("protagonists by mention count:", protagonists(index))
print("C     =", coherence_max_span(index), "  (mean of spans 5 and 0)")
print("C_bar =", coherence_avg_sections(index), "  (mean of 2 and 1 sections)")

# Ann runs and is red; Bo is red too, so only half of Ann's attributes are hers.
toks = "Ann runs red . Bo red .".split()
tags = ["PROPN", "VERB", "ADJ", "PUNCT", "PROPN", "ADJ", "PUNCT"]
per_entity, mean_v = consistency_V(AnnotatedNarrative("v", toks, [0, 4], [(0, 0, 1), (1, 4, 5)], tags))
print("V per entity:", per_entity)

# U scales the summed consistency by coherence.
print("U for C=5, L=10, Z=2, V={80, 60}:", consistency_U(5.0, [80.0, 60.0], 10, 2))

# Exact match needs the whole surface form, subset match any word of it.
gold = EntityPrompt([["Sheriff", "Bull", "Harper"], ["Todd"]])
print("match 'then Harper rode with Todd':", match_gold("then Harper rode with Todd", gold))
