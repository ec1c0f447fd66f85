"""Rule-based valence scoring for short texts in English and Portuguese.

Language is detected by lexicon-hit ratio (stopwords anchor the detection
and carry zero valence). Any other language goes through a translate stub
that is the identity at desk scale, so emoticons still score. A negator
flips the next opinion word. Scores are the mean valence of matched tokens,
clamped to [-1, 1]; the class threshold is +-0.05.
"""

from __future__ import annotations

import re
import unicodedata

SENTIMENT_THRESHOLD = 0.05

# matched against already-lowercased text, so the mouth class is lowercase
_EMOTICON_RE = re.compile(r"""[:;=8x][-']?[)(dpo/\\|]|<3|</3|:'\(""")
_WORD_RE = re.compile(r"[a-z]+")

EMOTICONS = {
    ":)": 0.7, ":-)": 0.7, ";)": 0.5, ":d": 0.9, "=)": 0.7, "xd": 0.8,
    ":p": 0.4, "<3": 0.9,
    ":(": -0.7, ":-(": -0.7, ":'(": -0.9, "</3": -0.9, ":/": -0.4,
    ":\\": -0.4, ":|": -0.1,
}

_EN_LEVELS = {
    0.9: ["love", "adore", "amazing", "wonderful", "fantastic", "excellent",
          "perfect", "best", "brilliant", "awesome", "delighted", "ecstatic",
          "superb", "outstanding"],
    0.6: ["great", "happy", "joy", "joyful", "glad", "good", "nice",
          "lovely", "beautiful", "fun", "enjoy", "enjoyed", "pleased",
          "cheerful", "smile", "smiling", "laugh", "laughing", "win",
          "winning", "won", "sunny", "bright", "friend", "friends",
          "success", "successful", "proud", "grateful", "thankful",
          "relaxed", "calm", "peaceful", "excited", "exciting", "cool",
          "sweet", "delicious", "tasty", "fresh", "warm", "loving"],
    0.3: ["fine", "okay", "ok", "decent", "pleasant", "comfortable",
          "interesting", "helpful", "useful", "better", "improved", "liked",
          "like", "likes", "hopeful", "hope", "satisfied", "content"],
    -0.3: ["tired", "bored", "boring", "slow", "meh", "annoying", "annoyed",
           "worried", "worry", "unsure", "doubt", "gray", "cold", "rain",
           "rainy", "late", "delayed", "busy", "stress", "stressed",
           "noisy", "crowded", "dull", "worse"],
    -0.6: ["bad", "sad", "unhappy", "angry", "anger", "mad", "upset",
           "hate", "hates", "pain", "painful", "sick", "ill", "hurt",
           "broken", "fail", "failed", "failing", "lost", "losing",
           "cry", "crying", "fear", "afraid", "scared", "lonely",
           "frustrated", "frustrating", "ugly", "dirty", "traffic"],
    -0.9: ["awful", "terrible", "horrible", "worst", "disaster",
           "disgusting", "miserable", "devastated", "furious", "dreadful",
           "nightmare", "hopeless", "depressed", "depressing"],
}

_PT_LEVELS = {
    0.9: ["adoro", "adorei", "amo", "amei", "maravilhoso", "maravilhosa",
          "fantastico", "fantastica", "excelente", "perfeito", "perfeita",
          "otimo", "otima", "melhor", "incrivel", "espetacular"],
    0.6: ["feliz", "alegre", "alegria", "bom", "boa", "bonito", "bonita",
          "lindo", "linda", "gosto", "gostei", "gostamos", "divertido",
          "divertida", "sorriso", "sorrir", "rir", "ganhei", "ganhar",
          "amigo", "amiga", "amigos", "sol", "ensolarado", "sucesso",
          "orgulhoso", "orgulhosa", "grato", "grata", "calmo", "calma",
          "animado", "animada", "fresco", "quente", "doce", "saboroso",
          "saborosa", "delicioso", "deliciosa"],
    0.3: ["bem", "razoavel", "agradavel", "confortavel", "interessante",
          "util", "melhorou", "contente", "satisfeito", "satisfeita",
          "esperanca", "tranquilo", "tranquila"],
    -0.3: ["cansado", "cansada", "aborrecido", "aborrecida", "chato",
           "chata", "preocupado", "preocupada", "duvida", "frio", "chuva",
           "chuvoso", "atrasado", "atrasada", "ocupado", "ocupada",
           "stress", "stressado", "barulhento", "cheio", "pior"],
    -0.6: ["mau", "ma", "triste", "tristeza", "zangado", "zangada",
           "odeio", "odiar", "dor", "doente", "magoado", "magoada",
           "partido", "partida", "falhei", "falhou", "perdi", "perdido",
           "chorar", "chorei", "medo", "assustado", "assustada", "sozinho",
           "sozinha", "frustrado", "frustrada", "feio", "feia", "sujo",
           "suja", "transito"],
    -0.9: ["horrivel", "terrivel", "pessimo", "pessima", "desastre",
           "nojento", "nojenta", "miseravel", "devastado", "devastada",
           "furioso", "furiosa", "pesadelo", "deprimido", "deprimida"],
}

_EN_STOPWORDS = ["the", "a", "an", "i", "you", "we", "they", "he", "she",
                 "it", "this", "that", "is", "are", "was", "were", "my",
                 "your", "of", "to", "in", "on", "with", "and", "or", "but",
                 "so", "very", "really", "just", "day", "today", "what",
                 "ever", "another", "went", "meeting", "much", "for", "at",
                 "have", "has", "had", "be", "been", "do", "does", "did"]
_PT_STOPWORDS = ["o", "a", "os", "as", "um", "uma", "eu", "tu", "ele",
                 "ela", "nos", "eles", "elas", "este", "esta", "isto",
                 "isso", "e", "sao", "era", "foi", "meu", "minha", "teu",
                 "de", "do", "da", "dos", "das", "em", "no", "na", "com",
                 "ou", "mas", "muito", "mesmo", "dia", "hoje", "que",
                 "sempre", "por", "aqui", "estou", "esta", "tudo", "deste",
                 "tempo", "para", "ter", "tem", "ser", "fico", "resultado"]

_EN_NEGATORS = {"not", "no", "never", "dont", "didnt", "isnt", "wasnt",
                "cant", "wont", "without"}
_PT_NEGATORS = {"nao", "nunca", "jamais", "sem", "nem"}


def _flatten(levels: dict) -> dict:
    out: dict[str, float] = {}
    for score, words in levels.items():
        for w in words:
            out[w] = score
    return out


EN_LEXICON = _flatten(_EN_LEVELS)
PT_LEXICON = _flatten(_PT_LEVELS)
_EN_KNOWN = set(EN_LEXICON) | set(_EN_STOPWORDS) | _EN_NEGATORS
_PT_KNOWN = set(PT_LEXICON) | set(_PT_STOPWORDS) | _PT_NEGATORS


def _normalize(text: str) -> str:
    decomposed = unicodedata.normalize("NFKD", text.lower())
    return "".join(c for c in decomposed if not unicodedata.combining(c))


def _tokenize(text: str) -> tuple[list[str], list[str]]:
    norm = _normalize(text)
    emoticons = [m.group(0) for m in _EMOTICON_RE.finditer(norm)]
    words = _WORD_RE.findall(_EMOTICON_RE.sub(" ", norm))
    return words, emoticons


def detect_language(text: str) -> str:
    """'en', 'pt', or 'unknown' by fraction of tokens each lexicon knows."""
    words, _ = _tokenize(text)
    if not words:
        return "unknown"
    en_hits = sum(1 for w in words if w in _EN_KNOWN)
    pt_hits = sum(1 for w in words if w in _PT_KNOWN)
    if en_hits == 0 and pt_hits == 0:
        return "unknown"
    if en_hits == pt_hits:
        # overlap words only ("ok", "stress"); either lexicon scores them
        return "en"
    return "en" if en_hits > pt_hits else "pt"


def analyze_sentiment(text: str) -> tuple[str, float, str]:
    """(language, score in [-1, 1], class); empty text is neutral."""
    words, emoticons = _tokenize(text)
    if not words and not emoticons:
        return "unknown", 0.0, "neutral"
    language = detect_language(text)
    if language == "pt":
        lexicon, negators = PT_LEXICON, _PT_NEGATORS
    else:
        # 'unknown' goes through the identity translate stub, then scores
        # against the English lexicon so emoticons and loanwords still count
        lexicon, negators = EN_LEXICON, _EN_NEGATORS
    scores: list[float] = []
    negate = False
    for w in words:
        if w in negators:
            negate = True
            continue
        if w in lexicon:
            val = lexicon[w]
            scores.append(-val if negate else val)
            negate = False
    scores.extend(EMOTICONS[e] for e in emoticons if e in EMOTICONS)
    score = min(max(sum(scores) / len(scores), -1.0), 1.0) if scores else 0.0
    if score >= SENTIMENT_THRESHOLD:
        cls = "positive"
    elif score <= -SENTIMENT_THRESHOLD:
        cls = "negative"
    else:
        cls = "neutral"
    return language, score, cls
