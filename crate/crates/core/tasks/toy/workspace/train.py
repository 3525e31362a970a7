import os

EPOCHS = 1


def train(epochs):
    # Each epoch buys a tenth of a point, up to a ceiling.
    return round(min(0.4 + 0.1 * epochs, 0.9), 4)


score = train(EPOCHS)
os.makedirs("submission", exist_ok=True)
with open(os.path.join("submission", "score.txt"), "w") as f:
    f.write(f"{score}\n")
print(f"epochs: {EPOCHS}")
print(f"validation score: {score}")
