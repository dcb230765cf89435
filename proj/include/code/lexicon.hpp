#pragma once

// Bundled word lists. They seed the tokenizer vocabulary and drive the
// rule/lexicon part-of-speech tagger.

#include <array>
#include <string_view>

namespace code::lexicon {

inline constexpr std::string_view kNouns[] = {
    "circle", "square", "triangle", "rectangle", "star", "shape", "shapes", "line", "dot", "ring",
    "pub", "night", "car", "cars", "street", "road", "city", "town", "building", "house",
    "home", "room", "kitchen", "table", "chair", "sofa", "bed", "window", "door", "wall",
    "floor", "roof", "garden", "park", "tree", "trees", "flower", "flowers", "grass", "field",
    "sky", "cloud", "clouds", "sun", "moon", "light", "lights", "lamp", "fire", "water",
    "sea", "ocean", "beach", "sand", "river", "lake", "mountain", "mountains", "hill", "rock",
    "snow", "ice", "rain", "storm", "forest", "island", "bridge", "tower", "church", "castle",
    "dog", "dogs", "cat", "cats", "horse", "horses", "cow", "sheep", "bird", "birds",
    "fish", "duck", "bear", "lion", "tiger", "elephant", "giraffe", "zebra", "monkey", "animal",
    "man", "men", "woman", "women", "person", "people", "child", "children", "boy", "girl",
    "baby", "family", "friend", "friends", "crowd", "team", "player", "players", "couple", "group",
    "bus", "truck", "bike", "bicycle", "motorcycle", "train", "boat", "ship", "plane", "airplane",
    "balloon", "balloons", "kite", "ball", "game", "match", "sport", "bat", "racket", "skateboard",
    "food", "pizza", "cake", "bread", "sandwich", "apple", "banana", "orange", "fruit", "vegetable",
    "coffee", "tea", "cup", "glass", "bottle", "wine", "beer", "plate", "bowl", "dinner",
    "breakfast", "lunch", "restaurant", "bar", "shop", "store", "market", "office", "school", "hospital",
    "phone", "computer", "laptop", "screen", "television", "book", "books", "paper", "picture", "photo",
    "image", "painting", "sign", "poster", "map", "clock", "watch", "bag", "hat", "shirt",
    "dress", "shoe", "shoes", "umbrella", "glasses", "face", "hand", "hands", "head", "eye",
    "eyes", "hair", "smile", "day", "morning", "evening", "sunset", "sunrise", "winter", "summer",
    "spring", "autumn", "year", "time", "view", "scene", "background", "front", "side", "top",
    "bottom", "center", "corner", "edge", "area", "place", "world", "country", "village", "stage",
    "concert", "music", "party", "wedding", "festival", "holiday", "vacation", "trip", "walk", "ride",
    "car", "pubs", "nights", "object", "objects", "thing", "things", "toy", "toys", "box",
    "boxes", "letter", "word", "words", "text", "label"};

inline constexpr std::string_view kAdjectives[] = {
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "white", "black", "gray",
    "grey", "brown", "cyan", "magenta", "dark", "bright", "big", "small", "large", "little",
    "tiny", "huge", "old", "new", "young", "tall", "short", "long", "beautiful", "pretty",
    "happy", "sad", "hot", "cold", "warm", "cool", "wet", "dry", "empty", "full",
    "busy", "quiet", "loud", "clean", "dirty", "open", "closed", "wooden", "modern", "ancient",
    "local", "famous", "sunny", "cloudy", "snowy", "round", "flat", "colorful", "great", "good"};

inline constexpr std::string_view kVerbs[] = {
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have",
    "had", "do", "does", "did", "run", "runs", "running", "walk", "walking", "sit",
    "sits", "sitting", "stand", "stands", "standing", "play", "plays", "playing", "eat", "eating",
    "drink", "drinking", "look", "looking", "go", "going", "ride", "riding", "fly", "flying",
    "hold", "holding", "wear", "wearing", "see", "seen", "take", "taken", "make", "made"};

inline constexpr std::string_view kFunctionWords[] = {
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each",
    "every", "and", "or", "but", "nor", "so", "of", "in", "on", "at",
    "to", "from", "with", "without", "by", "for", "over", "under", "near", "next",
    "behind", "above", "below", "into", "onto", "through", "during", "after", "before", "while",
    "it", "its", "he", "she", "they", "we", "you", "i", "his", "her",
    "their", "our", "my", "your", "there", "here", "very", "quickly", "slowly", "not",
    "no", "one", "two", "three", "up", "down"};

}  // namespace code::lexicon
