"""Prompt templates for every model-facing step in the pipelines.

Templates are plain text with single-braced placeholders ({papers},
{user_goal}, ...). Literal braces belonging to the JSON format examples are
escaped as doubled braces where the template needs it; `render_template`
substitutes only the named placeholders and then unescapes, so substituted
values may safely contain braces themselves.

Do not reflow or "fix" whitespace here: rendered prompts are pinned by
golden-file tests, and cache keys hash the rendered text.
"""

from __future__ import annotations

SYSTEM_PROMPT = (
    "You are an intelligent and precise assistant that can understand the "
    "contents of research papers. You are knowledgable on different fields "
    "and domains of science, in particular computer science. You are able "
    "to interpret research papers, create questions and answers, and "
    "compare multiple papers."
)

# Synthesize a table intent (open-ended question) from table content and context.
INTENT_GENERATION_TEMPLATE = '''
When writing a scientific research paper, we often include
tables comparing different works to accomplish a variety
of goals. 
The author has this goal in mind when they create the table
for what they want to convey to the reader via the
objective comparison of papers. For example, some potential goals might include: 1. Highlighting gaps in existing research: By comparing
related studies, the table can show areas where there is
limited research or unresolved questions, positioning the
current study as addressing those gaps. 2. Contextualizing the study: It helps place the current
research within the broader scientific context, showing
how it builds upon or differs from previous work. 3. Evaluating methodology differences: It allows for an
easy comparison of the methodologies used in different
studies, illustrating why the chosen methods in the
current paper are innovative, more robust, or better 
suited for the research problem. 4. Demonstrating novelty: By showing what has already
been done, a comparison table emphasizes the unique
contribution or novelty of the present study. 5. Assessing the consistency of results: The table can
highlight differences or consistencies in findings across
studies, helping the reader understand how results align
or contrast with existing literature. 6. Simplifying complex information: It makes it easier for 
readers to quickly grasp how various studies relate to one
another, especially when reviewing large bodies 
of literature. 7. Supporting the literature review: It strengthens the
literature review by systematically summarizing relevant
research, which aids in the argument for why the current 
study is needed. Generally this goal can be written down as a simple 
open-ended question that the author anticipates that 
the reader will have and that can be answered with the table. Your task is to generate this goal given a particular table
from a research paper. You are also given the title 
and abstract of the paper, the description of the table 
and additional information about how the table is 
referenced in the text of the paper. [Table] {table}
[Caption] {caption} [In-text references] {in_text_refs} We also provide information about the papers being discussed
in the table. You want the goal to be one that helps a 
future user actionably create the table given the information
in these papers: {papers}
Return output in the following JSON format: 
{{'goal':<your goal>, 'justification':<justification of the
goal>}}
'''

# Score candidate intents 1-5 and pick the best one.
INTENT_JUDGE_TEMPLATE = '''
Imagine you are a co-author of a scientific paper and the
first author has created a table comparing different 
papers/methods. You are reading the table along with the
caption of the paper and references to the table in the 
text of the paper. You are trying to guess what is the 
intent with which your co-author created this particular 
table. Given a set of candidate intents that you think they 
might have had, your task is to select the best user 
intent out of them. Assign a score to each candidate on
a scale of 1 to 5 on how well it fits what they might have
thought. Prioritize selecting a user intent that is highly
specific to the particular information in the table. 
The output format is a JSON with a string valued 
justification containing the scores assigned to each 
candidate schema along with why that score was assigned. 
You should also provide your final choice of the best 
schema. If you feel that none of them are good, then 
reply with None here. [Table] {table} [Caption] {caption} [In-text references] {in_text_refs} [Candidate goals] {goal_text} Return the output in the following JSON format. The
justification should include the reasoning for the 
score as a string, the best_goal should be the text of 
the best candidate and nothing else: {{'justification':
<justification for the score>, 'best_goal':<the best 
candidate selected>}} '''

# Single-shot schema generation from titles and abstracts.
JOINT_TITLE_ABSTRACT_TEMPLATE = '''
Imagine the following scenario: A user is making a table
for a scholarly paper that contains information about 
multiple papers and compares these papers. To compare 
and contrast the papers , the user provides the title 
and content of each paper. Your task is the following: Given a list of papers , you
should find the appropriate number of attributes that are
shared by the given research papers and can be used to 
compare them. So each attribute is a topic that would be
covered in the Related Work section of the user's paper. Return a JSON object in the following format: """json {{"
<attribute 1>": {{"definition":<your definition of why this
attribute should be an axis of comparison>, "output_format":
<describe the range of output values that will be filled in,
is it numbers, string values or another format>}} , ...}} 
""" {papers} '''

# Single-shot schema generation guided by the table caption and in-text references.
JOINT_CAPTION_INTEXT_TEMPLATE = '''
Imagine the following scenario: A user is making a table
for a scholarly paper that contains information about 
multiple papers and compares these papers. To compare and
contrast the papers , the user provides the title and 
content of each paper. To help you build the table, the 
user provides a caption of this table , which is referred
to in the paper as additional information. [Caption] {caption} [In-text references] {in_text_refs} [Papers] {papers} Your task is the following: Given a list of papers, you 
should find the appropriate number of attributes that are 
shared by the given research papers and can be used to 
compare them. So each attribute is a topic that would be 
covered in the Related Work section of the user's paper. Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of why 
this attribute should be an axis of comparison>, 
"output_format":<describe the range of output values that 
will be filled in, is it numbers, string values or 
another format>}} , ...}} """ '''

# Single-shot schema generation guided by the table intent.
JOINT_TITLE_ABSTRACT_INTENT_TEMPLATE = '''
Imagine the following scenario: A user is making a table
for a scholarly paper that contains information about 
multiple papers and compares them. To compare and contrast
these papers , the user provides the title and content 
of each paper below. To help you build the table , the user
also provides you with the goal that they want to 
accomplish with this table in the form of an open question. [User Goal] {user_goal} Your task is the following: Given a list of papers , you
should find the appropriate number of attributes that are
shared by the given research papers and can be used to compare
them. So each attribute is a topic that would be covered 
in the Related Work section of the user's paper. Remember,
the table should answer the question from the user goal. Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of why 
this attribute should be an axis of comparison>, 
"output_format":<describe the range of output values that
will be filled in, is it numbers, string values or another
format>}} , ...}} """ [Papers] {papers}
'''

# Single-shot schema generation from titles and full texts.
JOINT_FULL_TEXT_TEMPLATE = '''
Imagine the following scenario: A user is making a
table for a scholarly paper that contains 
information about multiple papers and compares these
papers. To compare and contrast the papers , the 
user provides the title and content of each paper. Your task is the following: Given a list of papers , 
you should find the appropriate number of attributes 
that are shared by the given research papers and can
be used to compare them. So each attribute is a topic
that would be covered in the Related Work section of
the user's paper. Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of 
why this attribute should be an axis of comparison>,
"output_format":<describe the range of output values 
that will be filled in, is it numbers, string values 
or another format>}} , ...}} """ {full_text_papers} '''

# Single-shot schema generation from full texts, guided by the table intent.
JOINT_FULL_TEXT_INTENT_TEMPLATE = '''
Imagine the following scenario: A user is making a 
table for a scholarly paper that contains 
information about multiple papers and compares 
them. To compare and contrast these papers , the
user provides the title and content of each paper
below. To help you build the table , the user also
provides you with the goal that they want to 
accomplish with this table in the form of an open
question. [User Goal] {user_goal} Your task is the following: Given a list of papers ,
you should find the appropriate number of attributes
that are shared by the given research papers and
can be used to compare them. So each attribute is a
topic that would be covered in the Related Work 
section of the user's paper. Remember, the table 
should answer the question from the user goal. Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of 
why this attribute should be an axis of comparison>,
"output_format":<describe the range of output values 
that will be filled in, is it numbers, string values 
or another format>}} , ...}} """ {full_text_papers} '''

# Single-shot schema generation with worked examples plus the table intent.
JOINT_ICL_INTENT_TEMPLATE = '''
Imagine the following scenario: A user is making a table for
a scholarly paper that contains information about multiple
papers and compares them. To compare and contrast these 
papers , the user provides the title and content of each
paper below. Here are some representative examples of the
schema of the table given the content of the papers 
being compared: [Representative Examples] {icl_text} Your task is the following: Given a list of papers, you 
should find the appropriate number of attributes that are
shared by the given research papers and can be used to 
compare them. So each attribute is a topic that would be
covered in the Related Work section of the user's paper.
Remember, the table should answer the question from the 
user goal. Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of why
this attribute should be an axis of comparison>, 
"output_format":<describe the range of output values that
will be filled in, is it numbers, string values or another
format>}} , ...}} """ To help you build the table , the user also provides you
with the goal that they want to accomplish with this table
in the form of an open question. [User Goal] {user_goal} Here is the information about the papers being compared: {papers}
'''

# Summarize one paper into exhaustive single-sentence bullets.
CONCEPT_SUMMARIZE_TEMPLATE = '''
I have the following TEXT EXAMPLE:
{ex}

Please summarize ALL the text in this EXAMPLE into 
bullet points ensuring that you cover all of the 
content in the example. Each bullet point should 
be a single sentence. The example is a research paper
so make sure you cover all aspects in the various
bullet points including all specific details about
the background, objective, method, experimental 
setups, names of datasets, results and takeaways.
Make sure to be very detailed in writing bullet 
points--for example, don't say 'other methods', 
instead specify which are the methods mentioned in
the text. We want as many details as possible such
that all the information in the paper is covered in
at least one bullet point. Phrase each bullet point
such that it is understandable without needing
external context. Please respond ONLY with a valid
JSON in the following format:
{{
    "bullets": [ "<BULLET_1>", "<BULLET_2>", ... ]
}}
'''

# Summarize one paper into bullets oriented toward the table intent.
CONCEPT_SUMMARIZE_INTENT_TEMPLATE = '''
I have the following TEXT EXAMPLE:
{ex}

I also have an associated USER INTENT:
{goal}

Please summarize ALL the text in this EXAMPLE into 
bullet points in the context of the provided USER 
INTENT. Make sure that you cover all of the content
in the example, relevant to the particular USER 
INTENT. Each bullet point should be a single sentence.
Tailor each bullet point in the context of providing
information that would be informatinve and relevant to
a user with that USER INTENT. The example is a 
research paper so make sure you cover all aspects in
the various bullet points including all specific 
details about the background, objective, method, 
experimental setups, names of datasets, results and
takeaways. Make sure to be very detailed in writing
bullet points--for example, don't say 'other methods',
instead specify which are the methods mentioned in 
the text. We want as many details as possible such 
that all the information in the paper is covered in at
least one bullet point. Phrase each bullet point such 
that it is understandable without needing external 
context. Please respond ONLY with a valid JSON in 
the following format:
{{
    "bullets": [ "<BULLET_1>", "<BULLET_2>", ... ]
}}
'''

# Name the unifying patterns in one cluster of bullets.
CONCEPT_SYNTHESIZE_TEMPLATE = '''
I have this set of bullet points from a set of 
research papers:
{examples}

Please write a summary of {n_concepts} unifying 
patterns for these examples. {seeding_phrase} For 
each high-level pattern, write a 2-4 word NAME for
the pattern and an associated 1-sentence ChatGPT 
PROMPT that could take in a new text example and 
determine whether the relevant pattern applies. Also
include 1-2 example_ids for items that BEST 
exemplify the pattern. Please respond ONLY with 
a valid JSON in the following format:
{{
    "patterns": [ 
        {{"name": "<PATTERN_NAME_1>", "prompt": "
        <PATTERN_PROMPT_1>", "example_ids": ["<EXAMPLE_ID_1>", "
        <EXAMPLE_ID_2>"]}},
        {{"name": "<PATTERN_NAME_2>", "prompt": "
        <PATTERN_PROMPT_2>", "example_ids": ["<EXAMPLE_ID_1>", "
        <EXAMPLE_ID_2>"]}},
    ]
}}
'''

# Flag concepts that are too narrow or too generic for removal.
CONCEPT_FILTER_TEMPLATE = '''
I have this set of themes generated from text examples:
{concepts}

Please identify any themes that should be REMOVED 
because they are either:
(1) Too specific/narrow and would only describe a few 
examples, or 
(2) Too generic/broad and would describe nearly all 
examples.
If there no such themes, please leave the list empty.
Please respond ONLY with a valid JSON in the 
following format:

{{
    "remove": [ 
        "<THEME_NAME_5>",
        "<THEME_NAME_6>",
    ]
}}
'''

# Flag concepts unrelated to the guiding theme for removal.
CONCEPT_INTENT_FILTER_TEMPLATE = '''
I have this dict of CONCEPTS (keys) and their 
corresponding inclusion criteria (values), as follows:
{concepts}

I have the following THEME:
{seed}

Please identify any CONCEPTS that DO NOT relate to 
the THEME and that should be removed. If there no 
such concepts, please leave the list empty.
Please respond ONLY with a valid JSON in the following format:

{{
    "remove": [ 
        "<CONCEPT_NAME_5>",
        "<CONCEPT_NAME_6>",
    ]
}}
'''

# Merge overlapping concept pairs under new names.
CONCEPT_MERGE_TEMPLATE = '''
I have this set of themes generated from text examples:
{concepts}

Please identify any PAIRS of themes that are 
similar or overlapping that should be MERGED together. 
Please respond ONLY with a valid JSON in the following 
format with the original themes and a new name and 
prompt for the merged theme. Do NOT simply combine the 
prior theme names or prompts, but come up with a new 
2-3 word name and 1-sentence ChatGPT prompt. If there
no similar themes, please leave the list empty.

{{
    "merge": [ 
        {{
            "original_themes": ["<THEME_NAME_A>", "
            <THEME_NAME_B>"],
            "merged_theme_name": "<THEME_NAME_AB>",
            "merged_theme_prompt": "<THEME_PROMPT_AB>",
        }},
        {{
            "original_themes": ["<THEME_NAME_C>", "
            <THEME_NAME_D>"],
            "merged_theme_name": "<THEME_NAME_CD>",
            "merged_theme_prompt": "<THEME_PROMPT_CD>",
        }}
    ]
}}
'''

# Turn surviving concepts into a comparison schema answering the intent.
CONCEPTS_TO_SCHEMA_TEMPLATE = '''
Consider the task of a user writing a research paper 
and creating a table to compare and contrast a set of
related papers. Given a list of concepts obtained 
from a set of papers, your task is to create the schema
for this table. [List of Concepts] {concepts} The goal of the schema is to answer the specific user 
goal when creating the table as follows: [User Goal] {user_goal} You should find the appropriate number of attributes 
from these concepts that are most useful for comparing
the papers in order to achieve the user goal. Each 
attribute you select to be a part of the schema is 
like a topic covered in the  Related Work section of
the user's paper. Return the schema as a JSON object in the following 
format: """json {"<attribute 1>": {"definition":
<your definition of why this attribute should be an
axis of comparison>, "output_format":<describe the 
range of output values that will be filled in, is it
numbers, string values or another format>} , ...} """ '''

# Update the working schema from the next batch of paper summaries.
SEQUENTIAL_UPDATE_TEMPLATE = '''
Imagine you are a co-author of a scientific paper and
the first author is creating a table for comparing 
different papers/methods. You are aware of the intent
of the author about the information they want to 
convey via the table. You are considering papers one batch at a time and updating
the schema every time you get a new paper. Given the current schema, the original author intent 
for the table, the information from the batch of papers, and 
titles+abstracts of all papers, update the schema accordingly.
To update the schema, you can add or remove columns 
as well as modify existing columns as appropriate. You
can also do nothing if the existing schema is good. If
the current schema is empty, create one from scratch. 
Every time you update the schema, make sure you cover 
all relevant information from all papers so far, and 
keep the schema readable and meaningful. [Intent] {intent} [Current Schema] {curr_schema} [New Batch] {new_batch} [Summaries Of All Papers] {past_papers} Return a JSON object in the following format: """json 
{{"<attribute 1>": {{"definition":<your definition of 
why this attribute should be an axis of comparison>, 
"output_format":<describe the range of output values 
that will be filled in, is it numbers, string values 
or another format>}} , ...}} """ '''

# Produce one atomic critique of a schema without seeing any reference.
SELF_CRITIQUE_TEMPLATE = '''
Imagine you are a co-author of a scientific paper 
and the first author is creating a table for 
comparing different papers/methods. You are aware
of the intent of the author about the information
they want to convey via the table. Given the author intent and the schema of the 
table with the papers being compared, you are 
giving them A SINGLE PIECE OF feedback on the 
schema of the table based on various criteria. 1. You want the schema to be relevant to the user
goal. Are all the schema items relevant to the 
goal? Is there any information missing in the 
paper information which is relevant to the user
goal which is not included in the schema? 2. You want the schemas to be non-redundant. If
there is some information shared in the different
aspects of the schema, there is redundancy. If 
there is high redundancy, a user might find it 
hard to understand the table. Are there 
redundant schema items? 3. You want the schema to be readable in that
the amount of complexity in each of the columns
of the table to be roughly uniform. Are there
some columns that are on different complexity
levels to others which makes the schema less 
readable? 4. You want the schema to generally be 
informative to the reader. Would the user find
the table informative? Is there any missing 
information in the schema? 5. You want the schema to be highly specific 
to the user goal. Can you improve the 
specificity somehow? 6. Are there other dimensions that you notice
as issues with the schema? Remember to be HIGHLY CRITICAL. You want the 
feedback to be actionable and you want to help
them improve their work. You are only allowed
to give one SINGLE piece of feedback so make 
sure that you choose the most important piece
of feedback and provide that. 
[Intent] {intent} [Schema] {schema} [Paper Information] {papers}
Return the feedback in the following JSON 
format: {{'model_feedback':<justification>}} '''

# Revise a schema so it incorporates one piece of feedback.
CRITIQUE_APPLY_TEMPLATE = '''
Imagine you are a co-author of a scientific 
paper and the first author is creating a table
for comparing different papers/methods. You 
are aware of the intent of the author about the
information they want to convey via the table. Your advisor has given you feedback on the 
schema of this table that is to be incorporated
to improve the table. Given the original schema, the feedback to be 
incorporated, the original author intent for 
the table and information about the papers 
being compared, update the schema accordingly.
If the feedback tells you to drop irrelevant 
columns then remove them from the schema, or 
if the feedback mentions to combine redundant
columns then remove the original ones after 
you combine them, or if the schema asks you 
to be more specific then update the column 
name in the schema, and so on. Your goal is
to incorporate all the feedback and improve 
on the original schema: [Intent] {intent} [Original Schema] {org_schema} [Feedback to be used] {feedback} [Compared Papers] {papers} Return a JSON object in the following format:
"""json {{"<attribute 1>": {{"definition":
<your definition of why this attribute should
be an axis of comparison>, "output_format":
<describe the range of output values that will
be filled in, is it numbers, string values or
another format>}} , ...}} """ '''

# Produce one critique with reference access but without revealing it.
ORACLE_CRITIQUE_TEMPLATE = '''
Imagine you are a teacher and you want to teach
your student how to write a related work table
that compares different papers. You gave them 
an assignment of creating a table to compare a
set of papers. You have the schema of the table
they created as well as a reference table and
information about the papers being compared.  You are giving them feedback on the schema they
created. But you also don't want to give them 
the answer. Generate a single critique. Here are
some example issues which you might want to 
critique in the created schema: 1. You want the schema to match the reference. 
Are there items in the created schema that are 
not present in the reference, are there 
reference items which are missing in the 
created schema? Remember to NOT MENTION THE 
REFERENCE. The student does not know the 
reference exists. You need to frame each 
critique with respect to the paper information.
Items in the reference are important from the
papers, so make sure that you discuss missing
items in that way. Similarly extra items in
the created schema not in the reference are
relatively unimportant in comparing the papers. 2. You want the schemas to be non-redundant. 
If there is some information shared in the 
different aspects of the schema, there is 
redundancy. If there is high redundancy, a user
might find it hard to understand the table. 
Are there redundant schema items? 3. You want the schema to be readable in that
the amount of complexity in each of the columns
of the table to be roughly uniform. Are there 
some columns that are on different complexity 
levels to others which makes the schema less 
readable? 4. You want the schema to generally be 
informative to the reader. Would the user find
the table informative? 5. Are there other dimensions that you notice 
as issues with the schema? Remember to be HIGHLY CRITICAL. You want the
feedback to be actionable, and you do not want
to leak the reference so make sure that you 
always frame your critique in terms of the 
information from the papers and not the 
reference. Most importantly you are only allowed to 
suggest a SINGLE edit to the schema, so 
identify the most important issue wrong with
the schema and critique ONLY that one. [Created Schema] {gen_schema} [Reference Schema] {ref_schema} [Paper Information] {papers} Return the feedback in the following JSON 
format: {{'critique':<your critique>}} '''

# Produce one critique, shown worked critique examples first.
ICL_CRITIQUE_TEMPLATE = '''
Imagine you are a teacher and you want to teach
your student how to write a related work table
that compares different papers. You gave them 
an assignment of creating a table to compare a
set of papers. You have the schema of the table
they created, the intent that they wanted to 
convey with the table and information about 
the papers being compared.  You are giving them feedback on the schema 
they created. But you also don't want to give
them the answer. Generate a single critique.
Here are some example critiques to use as a 
reference to understand the task of critique 
writing: [Reference examples of critiques] 
{critique_text} Remember to be HIGHLY CRITICAL. You want the 
feedback to be actionable so make sure that 
you always frame your critique in terms of 
the information from the papers. Most importantly you are only allowed to 
suggest a SINGLE edit to the schema, so 
identify the most important issue wrong with
the schema and critique ONLY that one. [Intent] {intent} [Created Schema] {org_schema} [Paper Information] {papers} Return the feedback in the following JSON 
format: {{'critique':<your critique>}} '''


def render_template(template: str, **values: str) -> str:
    """Fill named placeholders, then unescape doubled braces.

    Equivalent to str.format for these templates, but safe for templates
    whose JSON examples use single braces and for values containing braces.
    """
    out = template.replace("{{", "\x00").replace("}}", "\x01")
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out.replace("\x00", "{").replace("\x01", "}")
