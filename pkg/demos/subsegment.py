"""Recovering sentence boundaries inside a long transcript.

Concatenates toy transcripts, garbles a few characters, and projects caption
sentence boundaries back onto the transcript through a character alignment.
"""

import numpy as np

from dualsub.align import align, format_script, project_boundaries
from dualsub.text import concat_sample, generate_toy_corpus, normalize_whitespace, strip_segment_tags
from dualsub.workflows import add_char_noise

rng = np.random.default_rng(3)
data = generate_toy_corpus(12, rng, filler_rate=0.0, repeat_rate=0.0)

for group in concat_sample(data, rng)[:3]:
    transcript = add_char_noise(" ".join(t.transcript for t in group), 0.05, rng)
    captions = [normalize_whitespace(strip_segment_tags(t.caption)) for t in group]
    target = " ".join(captions)
    cuts = [sum(len(c) + 1 for c in captions[: k + 1]) for k in range(len(captions) - 1)]
    script = align(transcript, target)
    edges = [0] + project_boundaries(script, cuts) + [len(transcript)]
    print(f"transcript: {transcript}")
    for a, b in zip(edges, edges[1:]):
        print(f"  | {transcript[a:b].strip()}")
    print(f"  cost {script.cost:.2f}, first edits:")
    for line in format_script(script).splitlines()[:3]:
        print(f"    {line}")
