"""Prompt template banks for training and evaluation.

Single-concept banks use one "{}" placeholder for the concept token.
The multi-concept bank uses named "{object}" and "{style}" placeholders.
Indices are stable: code and configs refer to templates by (bank, index).
"""

STYLE_TEMPLATES = (
    "a painting, art by {}",
    "a rendering, art by {}",
    "a cropped painting, art by {}",
    "the painting, art by {}",
    "a clean painting, art by {}",
    "a dirty painting, art by {}",
    "a dark painting, art by {}",
    "a picture, art by {}",
    "a cool painting, art by {}",
    "a close-up painting, art by {}",
    "a bright painting, art by {}",
    "a rendition, art by {}",
    "a nice painting, art by {}",
    "a small painting, art by {}",
    "a weird painting, art by {}",
    "a large painting, art by {}",
    "a serene landscape painting in the style of {}",
    "a bustling cityscape in the style of {}",
    "a painting of a cozy cottage in the woods in the style of {}",
    "a vibrant underwater scene in the style of {}",
    "a whimsical painting of a flying elephant in the style of {}",
    "a still life painting featuring fruit and flowers in the style of {}",
    "a portrait of a famous historical figure in the style of {}",
    "a painting of a dreamy night sky in the style of {}",
    "a colorful abstract painting in the style of {}",
    "a street scene from Paris in the style of {}",
    "a depiction of a beautiful sunset over the ocean in the style of {}",
    "a painting of a peaceful mountain village in the style of {}",
    "an energetic painting of dancers in motion in the style of {}",
    "a painting of a snow-covered winter scene in the style of {}",
    "a painting of a tropical paradise in the style of {}",
    "a painting of a magical forest filled with fantastical creatures in the style of {}",
    "a painting of a dramatic stormy seascape in the style of {}",
    "a portrait of a majestic lion in the style of {}",
    "a painting of a romantic scene between two lovers in the style of {}",
    "a painting of a serene Japanese garden in the style of {}",
    "a painting of a bustling marketplace in the style of {}",
    "a painting of a tranquil river scene in the style of {}",
    "a painting of a fiery volcano eruption in the style of {}",
    "a painting of a futuristic cityscape in the style of {}",
    "a painting of a whimsical circus scene in the style of {}",
    "a painting of a mysterious moonlit forest in the style of {}",
    "a painting of a dramatic desert landscape in the style of {}",
    "a portrait of a regal peacock in the style of {}",
    "a painting of a mystical island in the style of {}",
    "a painting of a lively carnival scene in the style of {}",
)

OBJECT_TEMPLATES = (
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
    "a photo of a {} playing sports",
    "a rendering of a {} at a concert",
    "a cropped photo of the {} cooking dinner",
    "the photo of a {} at the beach",
    "a photo of a clean {} participating in a marathon",
    "a photo of a dirty {} after a mud run",
    "a dark photo of the {} exploring a cave",
    "a photo of my {} at graduation",
    "a photo of the cool {} performing on stage",
    "a close-up photo of a {} reading a book",
    "a bright photo of the {} at a theme park",
    "a cropped photo of a {} hiking in the mountains",
    "a photo of the {} painting a mural",
    "a good photo of the {} at a party",
    "a photo of one {} playing an instrument",
    "a close-up photo of the {} giving a speech",
    "a rendition of the {} during a workout",
    "a photo of the clean {} gardening",
    "a rendition of a {} dancing in the rain",
    "a photo of a nice {} volunteering at a charity event",
    "a photo of a {} surfing a giant wave",
    "a rendering of a {} skydiving over a scenic landscape",
    "a cropped photo of the {} riding a rollercoaster",
    "the photo of a {} rock climbing a steep cliff",
    "a photo of a clean {} practicing yoga in a peaceful garden",
    "a photo of a dirty {} participating in a paintball match",
    "a dark photo of the {} stargazing at a remote location",
    "a photo of my {} crossing the finish line at a race",
    "a photo of the cool {} breakdancing in a crowded street",
    "a close-up photo of a {} blowing out candles on a birthday cake",
    "a bright photo of the {} flying a kite on a sunny day",
    "a cropped photo of a {} ice-skating in a winter wonderland",
    "a photo of the {} directing a short film",
    "a good photo of the {} participating in a flash mob",
    "a photo of one {} skateboarding in an urban park",
    "a close-up photo of the {} solving a Rubik's cube",
    "a rendition of the {} fire dancing at a beach party",
    "a photo of the clean {} planting a tree in a community park",
    "a rendition of a {} performing a magic trick on stage",
    "a photo of a nice {} rescuing a kitten from a tree",
)

MULTI_TEMPLATES = (
    "a photo of a {object} in the style of {style} with a clear background.",
    "a rendering of a {object} in the style of {style} with a clear background.",
    "a cropped photo of the {object} in the style of {style} with a clear background.",
    "the photo of a {object} in the style of {style} with a clear background.",
    "a photo of a clean {object} in the style of {style} with a clear background.",
    "a photo of a dirty {object} in the style of {style} with a clear background.",
    "a dark photo of the {object} in the style of {style} with a clear background.",
    "a photo of my {object} in the style of {style} with a clear background.",
    "a photo of the cool {object} in the style of {style} with a clear background.",
    "a close-up photo of a {object} in the style of {style} with a clear background.",
    "a bright photo of the {object} in the style of {style} with a clear background.",
    "a cropped photo of a {object} in the style of {style} with a clear background.",
    "a photo of the {object} in the style of {style} with a clear background.",
    "a good photo of the {object} in the style of {style} with a clear background.",
    "a photo of one {object} in the style of {style} with a clear background.",
    "a close-up photo of the {object} in the style of {style} with a clear background.",
    "a rendition of the {object} in the style of {style} with a clear background.",
    "a photo of the clean {object} in the style of {style} with a clear background.",
    "a rendition of a {object} in the style of {style} with a clear background.",
    "a photo of a nice {object} in the style of {style} with a clear background.",
    "a good photo of a {object} in the style of {style} with a clear background.",
    "a photo of the nice {object} in the style of {style} with a clear background.",
    "a photo of the small {object} in the style of {style} with a clear background.",
    "a photo of the weird {object} in the style of {style} with a clear background.",
    "a photo of the large {object} in the style of {style} with a clear background.",
    "a photo of a cool {object} in the style of {style} with a clear background.",
    "a photo of a small {object} in the style of {style} with a clear background.",
)

BANKS = {
    "style": STYLE_TEMPLATES,
    "object": OBJECT_TEMPLATES,
    "general": OBJECT_TEMPLATES,
    "multi": MULTI_TEMPLATES,
}

# Every 5th index is held out from training so evaluation prompts are unseen.
_EVAL_STRIDE = 5


def train_indices(bank):
    return tuple(i for i in range(len(bank)) if i % _EVAL_STRIDE != _EVAL_STRIDE - 1)


def eval_indices(bank):
    return tuple(i for i in range(len(bank)) if i % _EVAL_STRIDE == _EVAL_STRIDE - 1)
