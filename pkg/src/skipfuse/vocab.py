"""Reserved token ids and the word list of the synthetic caption language."""

PAD = 0
CLS = 1  # doubles as the decoder's begin-of-sequence token
MASK = 2
EOS = 3
N_SPECIAL = 4

COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
FILLS = ("solid", "hollow")
ROWS = ("top", "bottom")
COLS = ("left", "right")

WORDS = COLORS + SIZES + FILLS + ROWS + COLS
WORD_IDS = {w: N_SPECIAL + i for i, w in enumerate(WORDS)}
ID_WORDS = {i: w for w, i in WORD_IDS.items()}
ID_WORDS.update({PAD: "[PAD]", CLS: "[CLS]", MASK: "[MASK]", EOS: "[EOS]"})


def decode(ids) -> str:
    return " ".join(ID_WORDS.get(int(i), f"<{int(i)}>") for i in ids)
