"""Caption templates and the fixed whitespace vocabulary.

Id 0 is reserved for the null caption used by the unconditional branch of
classifier-free guidance.
"""

from __future__ import annotations

import numpy as np

NULL_TOKEN = "<null>"
NULL_ID = 0

LIGHTING_TAGS = ("torch", "day", "fog", "night")

_SUBJECTS = [
    "a cavalry unit", "a lone rider", "two soldiers", "a line of archers", "an armored knight",
    "a group of janissaries", "a messenger", "a war banner", "a supply wagon", "a commander",
    "three horsemen", "a sentry", "a scout", "a drummer", "a standard bearer",
]
_ACTIONS = [
    "rides through", "advances across", "waits near", "marches past", "crosses", "circles",
    "charges into", "retreats from", "gathers at", "patrols",
]
_PLACES = [
    "the battlefield", "the palace courtyard", "a muddy field", "the city walls", "a narrow gate",
    "the river bank", "a forest edge", "the camp", "a stone bridge", "the hills",
]
_LIGHTING = {
    "torch": ["torch-lit darkness", "flickering torchlight", "warm firelight", "burning braziers"],
    "day": ["bright daylight", "clear morning sun", "soft overcast light", "golden afternoon light"],
    "fog": ["atmospheric fog", "thick morning mist", "drifting haze", "pale fog"],
    "night": ["cold moonlight", "deep blue night", "starlit darkness", "a moonless night"],
}
_CAMERA = [
    "slow camera pan", "wide shot", "close-up", "tracking shot", "static shot", "low angle",
]
_LOOK = [
    "cinematic lighting", "shallow depth of field", "dramatic lighting", "film grain",
    "historical war scene", "muted colors", "high contrast",
]

_EXTRA = """
and with under over beside behind toward before after while as the a an of in on at by
dawn dusk evening noon horse horses sword swords spear spears shield shields helmet helmets
chainmail armor armour cloak cloaks smoke dust rain snow wind fire sparks flags tents
soldier soldiers army armies battle siege tower towers gate walls courtyard palace
dark bright cold warm pale golden blue orange red grey gray black white silver
quiet tense epic somber moody grim heroic distant nearby slowly quickly steady handheld
lens frame scene shot sequence motion camera light shadow shadows silhouette glow
""".split()


def _build_vocab() -> list[str]:
    words: list[str] = []
    seen = {NULL_TOKEN}
    pools = [_SUBJECTS, _ACTIONS, _PLACES, *_LIGHTING.values(), _CAMERA, _LOOK, [" ".join(_EXTRA)]]
    for pool in pools:
        for phrase in pool:
            for w in phrase.split():
                if w not in seen:
                    seen.add(w)
                    words.append(w)
    return [NULL_TOKEN, *words]


VOCAB: list[str] = _build_vocab()
VOCAB_INDEX: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)


class UnknownTokenError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    ids = []
    for w in text.lower().replace(",", " ").split():
        if w not in VOCAB_INDEX or w == NULL_TOKEN:
            raise UnknownTokenError(f"token {w!r} is not in the caption vocabulary")
        ids.append(VOCAB_INDEX[w])
    return ids


def detokenize(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


def make_caption(lighting_tag: str, rng: np.random.Generator) -> str:
    """Templated caption whose lighting phrase matches ``lighting_tag``."""
    if lighting_tag not in _LIGHTING:
        raise ValueError(f"unknown lighting tag {lighting_tag!r}")
    pick = lambda pool: pool[int(rng.integers(len(pool)))]  # noqa: E731
    return (f"{pick(_SUBJECTS)} {pick(_ACTIONS)} {pick(_PLACES)} {pick(_LIGHTING[lighting_tag])} "
            f"{pick(_CAMERA)} {pick(_LOOK)}")
